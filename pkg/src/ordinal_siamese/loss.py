"""Triplet losses and the progression-level weighting.

Progression levels are stored as integer tenths so that the level -> alpha
map is exact: level 0.6 is ``ProgressionLevel(6)`` and its alpha is
``(19 - 6) / 10 == 1.3``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Union

import numpy as np

from .tensor import Tensor, add, mul, relu, sub

__all__ = [
    "ProgressionLevel",
    "LevelError",
    "ALL_LEVELS",
    "alpha_of",
    "unweighted_loss",
    "weighted_loss",
]

DEFAULT_MARGIN = 1.0


class LevelError(ValueError):
    pass


@functools.total_ordering
@dataclass(frozen=True)
class ProgressionLevel:
    """Position on the MCI -> AD trajectory, 1..10 tenths (1.0 is the conversion scan)."""

    tenths: int

    def __post_init__(self):
        if not isinstance(self.tenths, (int, np.integer)) or not 1 <= self.tenths <= 10:
            raise LevelError(f"progression level must be 1..10 tenths, got {self.tenths!r}")

    @classmethod
    def from_rho(cls, rho: float) -> "ProgressionLevel":
        tenths = round(float(rho) * 10)
        if abs(tenths - float(rho) * 10) > 1e-6:
            raise LevelError(f"{rho!r} is not a multiple of 0.1")
        return cls(int(tenths))

    @property
    def rho(self) -> float:
        return self.tenths / 10

    @property
    def is_ad(self) -> bool:
        return self.tenths == 10

    def __float__(self) -> float:
        return self.rho

    def __lt__(self, other: "ProgressionLevel") -> bool:
        if not isinstance(other, ProgressionLevel):
            return NotImplemented
        return self.tenths < other.tenths

    def __str__(self) -> str:
        return f"{self.rho:.1f}"


ALL_LEVELS = tuple(ProgressionLevel(t) for t in range(1, 11))


def alpha_of(level: Union[ProgressionLevel, float]) -> float:
    """Weighting coefficient ``1.9 - rho`` for a negative at ``level``.

    AD scans (rho == 1.0) are anchors and positives and have no alpha.
    """
    if not isinstance(level, ProgressionLevel):
        level = ProgressionLevel.from_rho(level)
    if level.is_ad:
        raise LevelError("rho == 1.0 marks an AD scan; it is never a weighted negative")
    return (19 - level.tenths) / 10


def _check_distances(d_ap: Tensor, d_an: Tensor) -> None:
    if d_ap.shape != d_an.shape:
        raise ValueError(f"distance shapes differ: {d_ap.shape} vs {d_an.shape}")
    if (d_ap.data < 0).any() or (d_an.data < 0).any():
        raise ValueError("distances must be non-negative")


def unweighted_loss(d_ap, d_an, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Standard triplet hinge ``max(d_ap - d_an + margin, 0)``.

    Works elementwise when the distances are batched.
    """
    d_ap = d_ap if isinstance(d_ap, Tensor) else Tensor(d_ap)
    d_an = d_an if isinstance(d_an, Tensor) else Tensor(d_an)
    _check_distances(d_ap, d_an)
    if margin < 0:
        raise ValueError("margin must be non-negative")
    return relu(add(sub(d_ap, d_an), margin))


def weighted_loss(d_ap, d_an, alpha, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Weighted triplet hinge ``max(d_ap - alpha * d_an + margin, 0)``.

    ``alpha`` is a float or, for batched distances, one value per triplet.
    With ``alpha == 1`` the result is bit-identical to :func:`unweighted_loss`.
    """
    d_ap = d_ap if isinstance(d_ap, Tensor) else Tensor(d_ap)
    d_an = d_an if isinstance(d_an, Tensor) else Tensor(d_an)
    _check_distances(d_ap, d_an)
    if margin < 0:
        raise ValueError("margin must be non-negative")
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape not in ((), d_an.shape):
        raise ValueError(f"alpha shape {alpha.shape} does not match distances {d_an.shape}")
    return relu(add(sub(d_ap, mul(alpha, d_an)), margin))
