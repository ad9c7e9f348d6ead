"""Seeded, splittable random streams on top of numpy's counter-based Philox."""
from __future__ import annotations

import numpy as np

# fixed stream ids used across the package
STREAM_INIT = 0
STREAM_TRAIN = 1
STREAM_SUBSAMPLE = 2
STREAM_SAMPLES = 3


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for (seed, stream); same pair, same sequence."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__u64__": [int(v) for v in obj]}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _restore(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__u64__"}:
            return np.array(obj["__u64__"], dtype=np.uint64)
        return {k: _restore(v) for k, v in obj.items()}
    return obj


def get_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of the generator's position."""
    return _jsonable(rng.bit_generator.state)


def set_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = _restore(state)


def from_state(state: dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.Philox())
    set_state(rng, state)
    return rng
