"""Seeded sampling primitives and closed-form cascade moments.

Every random draw in the package goes through a :class:`RandomStream`, which
is keyed by ``(master_seed, stream_index)``.  Streams with different indices
come from independent ``SeedSequence`` children, so work can be split across
threads or processes without changing any sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError


@dataclass
class RandomStream:
    master_seed: int
    stream_index: int = 0
    _rng: np.random.Generator | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ParameterError(f"master_seed must be a 64-bit unsigned integer, got {self.master_seed}")
        if int(self.stream_index) < 0:
            raise ParameterError(f"stream_index must be non-negative, got {self.stream_index}")

    @property
    def rng(self) -> np.random.Generator:
        if self._rng is None:
            seq = np.random.SeedSequence(int(self.master_seed), spawn_key=(int(self.stream_index),))
            self._rng = np.random.Generator(np.random.PCG64(seq))
        return self._rng


@dataclass(frozen=True)
class CascadeParams:
    """Per-event probability that a fired pixel triggers one more (cross-talk)."""

    p: float

    def __post_init__(self):
        if not (math.isfinite(self.p) and 0.0 <= self.p < 1.0):
            raise ParameterError(f"cascade probability must lie in [0, 1), got {self.p}")

    @property
    def p_prime(self) -> float:
        """Expected extra detections per primary, ``p + p**2 + ... = p/(1-p)``."""
        return self.p / (1.0 - self.p)


def _check_mean(mean) -> np.ndarray:
    arr = np.asarray(mean, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ParameterError(f"Poisson mean must be finite and non-negative, got {mean}")
    return arr


def sample_poisson(stream: RandomStream, mean, size=None):
    """Exact Poisson draw(s) with the given mean."""
    arr = _check_mean(mean)
    out = stream.rng.poisson(arr, size=size)
    return int(out) if size is None and arr.ndim == 0 else out


def thin_binomial(stream: RandomStream, count, survival: float, size=None):
    """Keep each of ``count`` items independently with probability ``survival``."""
    if not (math.isfinite(survival) and 0.0 <= survival <= 1.0):
        raise ParameterError(f"survival must be a probability, got {survival}")
    n = np.asarray(count)
    if np.any(n < 0):
        raise ParameterError("count must be non-negative")
    out = stream.rng.binomial(n, survival, size=size)
    return int(out) if size is None and n.ndim == 0 else out


def sample_cascade_total(stream: RandomStream, params: CascadeParams, size=None):
    """Total pixels fired by one primary event and its chain of secondaries.

    ``P(G = k) = (1 - p) p**(k-1)`` for ``k >= 1``.
    """
    out = stream.rng.geometric(1.0 - params.p, size=size)
    return int(out) if size is None else out


def sample_secondaries(stream: RandomStream, n_primary, params: CascadeParams) -> np.ndarray:
    """Summed ``G - 1`` over ``n_primary`` independent cascades, per entry.

    The sum of ``n`` geometric excesses is negative binomial, so this is the
    vectorised equivalent of drawing :func:`sample_cascade_total` once per
    primary.  One variate is consumed per entry, including zero entries.
    """
    n = np.asarray(n_primary, dtype=np.int64)
    draws = stream.rng.negative_binomial(np.maximum(n, 1), 1.0 - params.p)
    return np.where(n > 0, draws, 0)


def compound_poisson_moments(lambda_primary: float, params: CascadeParams) -> tuple[float, float]:
    """Mean and variance of a Poisson number of geometric cascades."""
    if not (math.isfinite(lambda_primary) and lambda_primary >= 0):
        raise ParameterError(f"lambda_primary must be finite and non-negative, got {lambda_primary}")
    p = params.p
    return lambda_primary / (1.0 - p), lambda_primary * (1.0 + p) / (1.0 - p) ** 2


def fano_from_crosstalk(p: float) -> float:
    CascadeParams(p)
    return (1.0 + p) / (1.0 - p)


def derive_seed(master_seed: int, *keys: int) -> int:
    """Independent 64-bit child seed for a labelled sub-experiment."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0])
