"""Counter-based random streams.

Every stochastic step in the system draws from a Philox generator keyed by
a SplitMix64 mix of integer labels, e.g. ``stream(seed, episode, TAG_ACT, t)``.
Because the key is a pure function of the labels, any draw can be replayed
in isolation (needed for importance probing) and runs are reproducible
regardless of execution order or parallelism.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1

# Stream tags. Fixed for the life of the on-disk formats; renumbering breaks
# byte-for-byte reproducibility of datasets and checkpoints.
TAG_RESET = 1
TAG_ACT = 2
TAG_PROBE = 3
TAG_SCENARIO = 4
TAG_EXPERT = 5
TAG_TRAIN = 6
TAG_DATA = 7
TAG_EVAL = 8
TAG_OBS = 9


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def mix64(*labels: int) -> int:
    """Fold integer labels into a single 64-bit key (order-sensitive)."""
    state = 0x243F6A8885A308D3  # arbitrary nonzero start
    for v in labels:
        state = _splitmix64(state ^ (int(v) & MASK64))
    return state


def str_key(s: str) -> int:
    """Stable 64-bit key for a string label (method names etc.)."""
    digest = hashlib.sha256(s.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(*labels: int) -> np.random.Generator:
    """A fresh Philox-backed generator keyed by the given labels."""
    return np.random.Generator(np.random.Philox(key=mix64(*labels)))
