"""Deterministic, named random substreams.

Every stochastic stage (dataset synthesis, parameter init, training-time
offsets, evaluation sampling) draws from its own substream so that changing
how many numbers one stage consumes never perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *names: str) -> np.random.Generator:
    """A generator keyed by (seed, names...); stable across runs and platforms."""
    entropy = [int(seed) & _MASK64] + [_name_key(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(entropy))
