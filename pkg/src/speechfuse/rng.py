"""Deterministic seeding utilities.

All randomness in the package flows through numpy's PCG64 bit generator,
constructed explicitly from integer seeds. Child seeds are derived from a
master seed with splitmix64, so the derivation is documented and stable
across platforms and library versions.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Named stream tags for deriving component seeds from a run seed.
STREAM_FRONTEND = 1
STREAM_DECODER = 2
STREAM_FUSION = 3
STREAM_LORA = 4
STREAM_PHASE_BASE = 100  # phase k samples from STREAM_PHASE_BASE + k


def splitmix64(x: int) -> int:
    """One step of the splitmix64 sequence (Steele et al. output function)."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(master: int, *indices: int) -> int:
    """Fold integer indices into a master seed, one splitmix64 step each."""
    state = splitmix64(master & _MASK64)
    for ix in indices:
        state = splitmix64(state ^ ((ix + 1) & _MASK64))
    return state


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator from an integer seed."""
    return np.random.Generator(np.random.PCG64(seed))
