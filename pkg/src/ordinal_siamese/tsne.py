"""Exact t-SNE for projecting embeddings to two dimensions.

Follows the standard algorithm: per-point Gaussian bandwidths found by
bisection on the precision to hit a target perplexity, symmetrised joint
probabilities, a Student-t output kernel, and gradient descent with
momentum, per-parameter gains and early exaggeration.  O(n^2) throughout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "TsneConfig",
    "TsneError",
    "TsneResult",
    "perplexity_of",
    "squared_distances",
    "conditional_probabilities",
    "joint_probabilities",
    "kl_divergence",
    "project",
]

logger = logging.getLogger(__name__)


class TsneError(ValueError):
    pass


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 32.0
    iterations: int = 1000
    output_dims: int = 2
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_initial: float = 0.5
    momentum_final: float = 0.8
    momentum_switch: int = 250
    init_sigma: float = 1e-4
    perplexity_tol: float = 1e-5
    max_bisection_steps: int = 50
    trace_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.perplexity <= 0:
            raise TsneError("perplexity must be positive")
        if self.iterations < 1 or self.output_dims < 1:
            raise TsneError("iterations and output_dims must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TsneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TsneError(f"unknown t-SNE config keys: {sorted(unknown)}")
        return cls(**d)


def perplexity_of(p_row: Sequence[float]) -> float:
    """``2 ** H(p)`` with the entropy in bits."""
    p = np.asarray(p_row, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise TsneError("probability row must be a non-empty vector")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise TsneError("probability row must be non-negative and sum to 1")
    nz = p[p > 0]
    return float(2.0 ** (-(nz * np.log2(nz)).sum()))


def squared_distances(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return (diff * diff).sum(axis=-1)


def _row_distribution(d: np.ndarray, beta: float):
    """Gaussian row for squared distances ``d`` (self excluded) at precision ``beta``."""
    shifted = d - d.min()
    w = np.exp(-beta * shifted)
    total = w.sum()
    p = w / total
    # entropy in nats: log Z + beta * E[d]
    h = math.log(total) + beta * float((shifted * p).sum())
    return p, math.exp(h)


def conditional_probabilities(sqdist: np.ndarray, perplexity: float, tol: float = 1e-5,
                              max_steps: int = 50):
    """Row-stochastic P_{j|i} matching ``perplexity`` per row.

    Returns ``(P, achieved, failed_rows)``; a row fails when bisection does
    not reach ``tol`` within ``max_steps``.
    """
    n = sqdist.shape[0]
    P = np.zeros((n, n))
    achieved = np.zeros(n)
    failed = []
    for i in range(n):
        d = np.delete(sqdist[i], i)
        spread = d - d.min()
        scale = np.median(spread[spread > 0]) if (spread > 0).any() else 1.0
        beta, lo, hi = 1.0 / scale, 0.0, math.inf
        p, perp = _row_distribution(d, beta)
        for _ in range(max_steps):
            if abs(perp - perplexity) <= tol:
                break
            if perp > perplexity:  # too flat: sharpen
                lo = beta
                beta = beta * 2.0 if hi == math.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            p, perp = _row_distribution(d, beta)
        if abs(perp - perplexity) > tol:
            failed.append(i)
        P[i, np.arange(n) != i] = p
        achieved[i] = perp
    return P, achieved, failed


def joint_probabilities(P_cond: np.ndarray) -> np.ndarray:
    n = P_cond.shape[0]
    return (P_cond + P_cond.T) / (2.0 * n)


def _student_t(y: np.ndarray):
    num = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


def kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float((P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))).sum())


@dataclass
class TsneResult:
    points: np.ndarray
    trace: list  # (iteration, KL(P || Q)) every cfg.trace_every iterations
    P: np.ndarray
    perplexities: np.ndarray
    failed_rows: list = field(default_factory=list)

    def kl_at(self, iteration: int) -> float:
        for it, kl in self.trace:
            if it == iteration:
                return kl
        raise KeyError(iteration)


def project(embeddings, labels: Optional[Sequence] = None, cfg: TsneConfig = TsneConfig()) -> TsneResult:
    """Project ``embeddings`` [n, d] to ``cfg.output_dims`` dimensions.

    ``labels`` are not used by the optimisation; they are accepted so
    callers can keep points and ground truth together.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise TsneError(f"embeddings must be [n, d], got shape {x.shape}")
    n = x.shape[0]
    if labels is not None and len(labels) != n:
        raise TsneError("labels and embeddings differ in length")
    if n < 4:
        raise TsneError("t-SNE needs at least 4 points")
    if not cfg.perplexity < (n - 1) / 3:
        raise TsneError(f"perplexity {cfg.perplexity} infeasible for {n} points (needs < {(n - 1) / 3:.3f})")
    if np.all(x == x[0]):
        raise TsneError("all input points are identical")

    P_cond, achieved, failed = conditional_probabilities(
        squared_distances(x), cfg.perplexity, cfg.perplexity_tol, cfg.max_bisection_steps)
    if failed:
        logger.warning("perplexity bisection did not converge for %d rows", len(failed))
    P = joint_probabilities(P_cond)

    rng = np.random.default_rng(cfg.seed)
    y = rng.normal(0.0, cfg.init_sigma, size=(n, cfg.output_dims))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    trace = []
    for it in range(1, cfg.iterations + 1):
        exaggerated = it <= cfg.exaggeration_iters
        momentum = cfg.momentum_initial if it <= cfg.momentum_switch else cfg.momentum_final
        num, Q = _student_t(y)
        W = ((cfg.early_exaggeration * P if exaggerated else P) - Q) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * y - W @ y)
        same_sign = (grad > 0) == (update > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - cfg.learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
        if it % cfg.trace_every == 0:
            trace.append((it, kl_divergence(P, _student_t(y)[1])))
    return TsneResult(y, trace, P, achieved, failed)
