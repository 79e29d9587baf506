"""Simulation laboratory for a Thompson-sampling mobile-health trial.

Modules map onto the pieces of the stack:

* :mod:`mrtsim.trial` - calendar, recruitment and the trial history store
* :mod:`mrtsim.features` - algorithm / environment state construction
* :mod:`mrtsim.bandit` - Bayesian linear regression posterior and smoothed
  posterior-sampling action selection
* :mod:`mrtsim.environment` - zero-inflated Poisson participant models,
  MAP fitting and null-environment projection
* :mod:`mrtsim.orchestrator` - day-by-day pipeline replay with fault injection
* :mod:`mrtsim.analysis` - did-we-learn resampling, pooling comparison, metrics
* :mod:`mrtsim.cli` - command line entry point
"""

__version__ = "0.1.0"
