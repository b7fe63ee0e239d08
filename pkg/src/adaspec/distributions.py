"""Probability-vector primitives.

A distribution over a vocabulary of size ``V`` is a plain float64 numpy
array of length ``V`` with nonnegative entries summing to one. Functions
here never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from adaspec.errors import DomainError, ZeroMass

SUM_TOL = 1e-9


@dataclass(frozen=True)
class Vocab:
    """Vocabulary description: size, end-of-sequence id and optional display strings."""

    size: int
    eos: int
    tokens: Optional[tuple] = None

    def __post_init__(self):
        if self.size < 2:
            raise DomainError(f"vocab size must be >= 2, got {self.size}")
        if not 0 <= self.eos < self.size:
            raise DomainError(f"eos {self.eos} outside vocab of size {self.size}")
        if self.tokens is not None and len(self.tokens) != self.size:
            raise DomainError("display strings must have one entry per token")

    @property
    def bos(self) -> int:
        # padding index for short contexts; never part of a distribution's support
        return self.size

    def to_dict(self) -> dict:
        d = {"size": self.size, "eos": self.eos}
        if self.tokens is not None:
            d["tokens"] = list(self.tokens)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        tokens = d.get("tokens")
        return cls(int(d["size"]), int(d["eos"]), tuple(tokens) if tokens is not None else None)


def is_dist(d, tol: float = SUM_TOL) -> bool:
    d = np.asarray(d, dtype=np.float64)
    return d.ndim == 1 and bool(np.all(d >= 0)) and abs(d.sum() - 1.0) <= tol


def normalize(f) -> np.ndarray:
    """Scale a nonnegative vector so it sums to one."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise DomainError("normalize expects nonnegative entries")
    total = f.sum()
    if total <= 0:
        raise ZeroMass("cannot normalize a vector with zero total mass")
    return f / total


def residual(p, q) -> np.ndarray:
    """Correction distribution ``Norm[(p - q)_+]`` used after a rejection."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DomainError(f"shape mismatch {p.shape} vs {q.shape}")
    return normalize(np.maximum(p - q, 0.0))


def accept_prob(p, q, y: int) -> float:
    """Probability ``min(1, p[y] / q[y])`` that a draft token ``y ~ q`` is kept."""
    qy = float(q[y])
    if qy <= 0.0:
        raise DomainError(f"token {y} has zero draft mass; it cannot have been sampled")
    return min(1.0, float(p[y]) / qy)


def sample(d, rng: np.random.Generator) -> int:
    """Draw one token by inverting the CDF with a single uniform from ``rng``.

    Exactly one ``rng.random()`` call is consumed, which keeps the
    random stream layout of the engine fixed.
    """
    return sample_with_uniform(d, rng.random())


def sample_with_uniform(d, u: float) -> int:
    cdf = np.cumsum(d)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    if idx >= len(cdf):
        # u * total landed on the final edge through rounding
        idx = int(np.flatnonzero(np.asarray(d) > 0)[-1])
    return idx


def top_k_truncate(d, k: int) -> np.ndarray:
    """Keep the ``k`` largest entries (ties go to the lower id) and renormalize."""
    d = np.asarray(d, dtype=np.float64)
    if not 1 <= k <= len(d):
        raise DomainError(f"k must lie in [1, {len(d)}], got {k}")
    if k == len(d):
        return d.copy()
    # stable sort on -d keeps lower ids first among equal masses
    keep = np.argsort(-d, kind="stable")[:k]
    out = np.zeros_like(d)
    out[keep] = d[keep]
    return normalize(out)


def apply_temperature(d, temperature: float) -> np.ndarray:
    """Return ``Norm[d ** (1 / temperature)]``; zero entries stay zero."""
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    d = np.asarray(d, dtype=np.float64)
    if temperature == 1.0:
        return d.copy()
    with np.errstate(divide="ignore"):
        logd = np.log(d)
    z = logd / temperature
    z = np.exp(z - z.max())
    return normalize(z)


def entropy(d) -> float:
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    d = np.asarray(d, dtype=np.float64)
    nz = d[d > 0]
    return float(-(nz * np.log(nz)).sum())


def onehot(index: int, size: int) -> np.ndarray:
    out = np.zeros(size, dtype=np.float64)
    out[index] = 1.0
    return out


def total_variation(a: dict, b: dict) -> float:
    """Total-variation distance between two laws given as ``{outcome: prob}`` maps."""
    keys = set(a) | set(b)
    return 0.5 * sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)


def as_dist(values: Sequence[float]) -> np.ndarray:
    d = np.asarray(values, dtype=np.float64)
    if not is_dist(d):
        raise DomainError("values do not form a probability vector")
    return d
