"""Command line interface.

Subcommands: gen-env, fit-env, simulate, pooling, did-we-learn, metrics.
Exit codes: 0 success, 1 usage error, 2 data or setup error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import seeding
from .analysis import (did_we_learn, dwl_output, error_metrics,
                       outcome_metrics, pooling_experiment)
from .config import RunConfig
from .environment import (ParticipantEnvModel, default_state_grid, gen_synthetic_models, map_fit,
                          zero_prob, zip_mean)
from .errors import InputError, MrtSimError
from .orchestrator import FaultPlan, fault_report, trial_fault_plan, run_trial
from .serialize import fmt_float, write_json
from .trial import (read_history_csv, read_snapshots_jsonl,
                    write_history_csv, write_snapshots_jsonl)

log = logging.getLogger("mrtsim")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_state(text: str) -> np.ndarray:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"unparsable state literal {text!r}") from None
    if len(vals) != 5:
        raise UsageError(f"state literal needs 5 comma-separated values, got {len(vals)}")
    return np.array(vals)


def _load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    except InputError as exc:
        raise UsageError(f"config: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, trial=dataclasses.replace(cfg.trial, master_seed=args.seed))
    if getattr(args, "reps", None) is not None:
        cfg = dataclasses.replace(cfg, reps=args.reps)
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_models(path) -> list[ParticipantEnvModel]:
    with open(path, encoding="utf-8") as fh:
        try:
            rows = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MrtSimError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(rows, list):
        raise MrtSimError(f"{path}: expected a JSON array of models")
    return [ParticipantEnvModel.from_json(r) for r in rows]


def _require_models(args, cfg):
    if not args.models:
        raise UsageError("--models is required")
    models = load_models(args.models)
    if len(models) < cfg.trial.num_participants:
        raise MrtSimError(f"{len(models)} models for {cfg.trial.num_participants} participants")
    return models


def cmd_gen_env(args) -> int:
    cfg = _load_config(args)
    models = gen_synthetic_models(cfg.trial, seeding.stream(cfg.trial.master_seed, "env-models"))
    out = _out_dir(args, cfg) / "models.json"
    write_json(out, [m.to_json() for m in models])
    grid = default_state_grid()
    base = np.mean([zip_mean(m, grid, 0).mean() for m in models])
    effect = np.mean([(zip_mean(m, grid, 1) - zip_mean(m, grid, 0)).mean() for m in models])
    zeros = np.mean([zero_prob(m, grid, 0).mean() for m in models])
    print(f"wrote {len(models)} models to {out}")
    print(f"grid-average baseline OSCB {base:.1f} s, treatment effect {effect:.1f} s, "
          f"P(OSCB = 0) {zeros:.3f}")
    return 0


def cmd_fit_env(args) -> int:
    cfg = _load_config(args)
    if not args.data:
        raise UsageError("--data is required")
    records = read_history_csv(args.data)
    by_p: dict = {}
    for r in records:
        by_p.setdefault(r.participant_id, []).append(r)
    restarts = args.restarts if args.restarts is not None else cfg.restarts
    models = []
    for pid in range(1, max(by_p, default=0) + 1):
        rows = by_p.get(pid, [])
        if not rows:
            log.warning("participant %d has no records; skipped", pid)
            continue
        # prior-day app feature on mornings after day 1 estimates the daily open rate
        opens = [r.env_state[3] for r in rows if r.slot == 0 and r.t > 1]
        p_app = float(np.mean(opens)) if opens else 0.5
        data = [(r.env_state, r.action, r.oscb) for r in rows]
        res = map_fit(data, restarts, seeding.stream(cfg.trial.master_seed, "fit", pid),
                      p_app=p_app, participant_id=pid)
        log.info("participant %d: log posterior %.3f", pid, res.log_posterior)
        models.append(res.model)
    out = _out_dir(args, cfg) / "models.json"
    write_json(out, [m.to_json() for m in models])
    print(f"fitted {len(models)} models to {out}")
    return 0


def _fault_plan(args, cfg):
    src = args.faults or cfg.fault_plan
    if not src:
        return FaultPlan()
    if src == "trial":
        return trial_fault_plan(cfg.trial)
    return FaultPlan.load(src)


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    models = _require_models(args, cfg)
    plan = _fault_plan(args, cfg)
    history, events = run_trial(cfg.trial, models, cfg.policy_mode, cfg.smoothing, plan,
                                cfg.trial.master_seed, cfg.prior)
    out = _out_dir(args, cfg)
    write_history_csv(history, out / "history.csv")
    write_snapshots_jsonl(history.snapshots, out / "snapshots.jsonl")
    events.write(out / "events.jsonl")
    if plan:
        write_json(out / "fault_report.json", fault_report(events))
    print(f"simulated {len(history.records)} decision times, {len(history.snapshots)} snapshots -> {out}")
    return 0


def cmd_pooling(args) -> int:
    cfg = _load_config(args)
    models = _require_models(args, cfg)
    rows = pooling_experiment(cfg.trial, models, cfg.reps, smoothing=cfg.smoothing, prior=cfg.prior,
                              workers=cfg.workers)
    out = _out_dir(args, cfg) / "pooling.csv"
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("mode,mean,mean_se,q1,q1_se\n")
        for r in rows:
            fh.write(",".join([r.mode] + [fmt_float(v) for v in (r.mean, r.mean_se, r.q1, r.q1_se)]) + "\n")
    for r in rows:
        print(f"{r.mode:>13}: mean {r.mean:.3f} ({r.mean_se:.3f})  q1 {r.q1:.3f} ({r.q1_se:.3f})")
    return 0


def cmd_did_we_learn(args) -> int:
    cfg = _load_config(args)
    if not args.state:
        raise UsageError("--state is required")
    f = parse_state(args.state)
    models = _require_models(args, cfg)
    if args.reference:
        snapshots = read_snapshots_jsonl(args.reference)
    else:
        history, _ = run_trial(cfg.trial, models, "full_pooling", cfg.smoothing, None,
                               cfg.trial.master_seed, cfg.prior)
        snapshots = history.snapshots
    reference, band = did_we_learn(snapshots, models, f, cfg.reps, cfg.trial, cfg.smoothing, cfg.prior,
                                   workers=cfg.workers)
    out = _out_dir(args, cfg) / "dwl.json"
    write_json(out, dwl_output(f, reference, band))
    inside = band.contains(reference.values)
    print(f"reference inside the {band.levels} band at {inside.sum()}/{len(inside)} update times -> {out}")
    return 0


def cmd_metrics(args) -> int:
    if not args.sim:
        raise UsageError("--sim is required")
    sim = read_history_csv(args.sim)
    result = outcome_metrics(sim)
    if args.ref:
        result.update(error_metrics(sim, read_history_csv(args.ref)))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "metrics.json", result)
    for k, v in result.items():
        print(f"{k}: {v}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mrtsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, models=True):
        sp.add_argument("--config", help="run config JSON")
        sp.add_argument("--seed", type=int, help="master seed (overrides config)")
        sp.add_argument("--out", help="output directory")
        if models:
            sp.add_argument("--models", help="participant model JSON")

    sp = sub.add_parser("gen-env", help="generate synthetic participant models")
    common(sp, models=False)
    sp.set_defaults(func=cmd_gen_env)

    sp = sub.add_parser("fit-env", help="MAP-fit participant models to a history CSV")
    common(sp, models=False)
    sp.add_argument("--data", help="history.csv to fit")
    sp.add_argument("--restarts", type=int)
    sp.set_defaults(func=cmd_fit_env)

    sp = sub.add_parser("simulate", help="run one simulated trial")
    common(sp)
    sp.add_argument("--faults", help="fault plan JSON, or 'trial' for the transcribed issue table")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("pooling", help="full vs no pooling comparison")
    common(sp)
    sp.add_argument("--reps", type=int)
    sp.set_defaults(func=cmd_pooling)

    sp = sub.add_parser("did-we-learn", help="null-environment resampling for one state")
    common(sp)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--state", help='five comma-separated values, e.g. "0,-0.7,-0.6,0,1"')
    sp.add_argument("--reference", help="posterior snapshots JSONL of the reference run")
    sp.set_defaults(func=cmd_did_we_learn)

    sp = sub.add_parser("metrics", help="outcome metrics and errors against a reference history")
    sp.add_argument("--sim", help="simulated history.csv")
    sp.add_argument("--ref", help="reference history.csv")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    level = os.environ.get("MRT_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mrtsim: error: {exc}", file=sys.stderr)
        return 1
    except (MrtSimError, OSError) as exc:
        print(f"mrtsim: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
