import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Counter-based (Philox) generator for an explicit seed.
    Distinct `stream` tuples give independent, reproducible substreams.
    """
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed: int, *stream: int) -> int:
    """64-bit child seed, for components that take a seed rather than a generator."""
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(s) for s in stream))
    return int(seq.generate_state(1, dtype=np.uint64)[0])
