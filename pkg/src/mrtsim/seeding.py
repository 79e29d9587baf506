"""Labeled random substreams derived from a single master seed.

Each stream is keyed by ``(master_seed, label, *ints)`` through a stable hash,
so adding participants or repetitions never shifts the draws of other streams.
"""

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream_seed(master_seed: int, label: str, *keys: int) -> np.random.SeedSequence:
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF, _label_key(label)]
    entropy.extend(int(k) for k in keys)
    return np.random.SeedSequence(entropy)


def stream(master_seed: int, label: str, *keys: int) -> np.random.Generator:
    """Return an independent generator for ``label`` and integer ``keys``."""
    return np.random.Generator(np.random.PCG64(stream_seed(master_seed, label, *keys)))


def derive_seed(master_seed: int, label: str, *keys: int) -> int:
    """A 63-bit integer seed, e.g. for per-repetition master seeds."""
    state = stream_seed(master_seed, label, *keys).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1] & 0x7FFFFFFF) << 32)
