"""Deterministic random streams.

Every unit of work (skeleton channel, replica, coupling run) owns a Philox stream keyed by the
master seed and an integer path, so results never depend on how work is scheduled.
"""

import numpy as np

# first element of a key path, keeps stream families apart
SKELETON = 0
REPLICA = 1
COUPLING = 2
REGENERATION = 3
BURN_IN = 4
SAMPLING = 5


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator for (seed, key...)."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(sequence))


def open_uniforms(rng: np.random.Generator, size: int) -> np.ndarray:
    """Uniforms on the open interval (0, 1) with 53-bit resolution."""
    return (rng.integers(0, 2**53, size=size, dtype=np.int64) + 0.5) / 2.0**53
