"""Seed handling: one root seed, fixed named sub-streams.

Every run derives all of its randomness from a single integer seed through
`np.random.SeedSequence.spawn`, so adding draws to one stream (say, extra
evaluation samples) never shifts another (say, weight init).
"""

from __future__ import annotations

import numpy as np

STREAM_NAMES = ("init", "data", "mask", "epsilon", "sampler", "eval")


def split_streams(seed: int) -> dict[str, np.random.Generator]:
    """Return one independent Generator per named stream, all derived from `seed`."""
    children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
    return {name: np.random.default_rng(child) for name, child in zip(STREAM_NAMES, children)}
