"""Estimator-guided phase retrieval via extended support proposals.

The solver (`pred`) consumes a probability vector d of length n-1, where
d[i] is the estimated probability that position i+1 belongs to the
union-of-equivalent-supports signature of the unknown signal.  Index 0 is
always a member by normalization, so it is prepended to every proposal.
Each iteration runs three-stage estimation (`tse`): solve on the extended
support, hard-threshold to k indices, re-solve on those k.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gauss_newton import GnConfig, dgn
from .signals import PhaseProblem, magnitudes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtendedSupport:
    """Candidate index set of size q with 2k <= q <= 3k, always containing 0."""

    indices: frozenset
    q: int

    def __post_init__(self):
        if len(self.indices) != self.q:
            raise ValueError("q must equal the number of indices")
        if 0 not in self.indices:
            raise ValueError("extended supports must contain index 0")


@dataclass
class PredConfig:
    kappa_iter: int = 100
    epsilon: float = 0.0
    gn: GnConfig = field(default_factory=GnConfig)

    def __post_init__(self):
        if self.kappa_iter < 1:
            raise ValueError("kappa_iter must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")


@dataclass
class PredStats:
    eta: int = 0  # Gauss-Newton executions: 2 per TSE call
    iterations: int = 0
    best_objective: float = math.inf
    # per iteration: (q, support tuple, objective, l1 residual)
    history: list = field(default_factory=list)


@dataclass(frozen=True)
class PredResult:
    x: np.ndarray
    support: np.ndarray
    stats: PredStats


def hard_threshold_support(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest |values|, ties broken toward lower indices."""
    values = np.asarray(values)
    if k < 1 or k > values.size:
        raise ValueError("k must satisfy 1 <= k <= len(values)")
    order = np.argsort(-np.abs(values), kind="stable")
    return np.sort(order[:k])


def tse(
    problem: PhaseProblem,
    k: int,
    extended,
    gn_cfg: GnConfig | None = None,
    rng: np.random.Generator | None = None,
) -> tuple:
    """Three-stage estimation: solve on the extended support, keep the k
    largest-magnitude entries, re-solve on that k-subset.

    Returns (x_hat, support) with |support| = k.
    """
    indices = sorted(int(i) for i in (extended.indices if isinstance(extended, ExtendedSupport) else extended))
    if len(indices) < k:
        raise ValueError(f"extended support of size {len(indices)} cannot cover k={k}")
    interim = dgn(problem, indices, gn_cfg, rng=rng)
    support = hard_threshold_support(interim.x, k)
    final = dgn(problem, support, gn_cfg, rng=rng)
    return final.x, support


def init_extended(d: np.ndarray, k: int, rng: np.random.Generator) -> ExtendedSupport:
    """First extended-support proposal: index 0 plus the positions mapped
    from the q-1 largest entries of d, with q uniform on [2k, 3k]."""
    d = np.asarray(d, dtype=float)
    n = d.size + 1
    q = int(rng.integers(2 * k, 3 * k + 1))
    if q - 1 > d.size:
        raise ValueError(f"cannot select {q - 1} positions from a vector of length {d.size}")
    top = np.argsort(-d, kind="stable")[: q - 1]
    indices = frozenset({0} | {int(i) + 1 for i in top})
    return ExtendedSupport(indices=indices, q=q)


def resample_extended(
    d: np.ndarray, current_support, k: int, rng: np.random.Generator
) -> ExtendedSupport:
    """Next proposal: keep the current k-support (plus index 0) and fill up
    to a fresh q with positions sampled without replacement proportionally
    to d, excluding positions already in the support.

    When fewer positive-probability positions remain than needed, all of
    them are taken and the remainder is padded uniformly (logged)."""
    d = np.asarray(d, dtype=float)
    n = d.size + 1
    support = set(int(i) for i in current_support)
    if len(support) != k:
        raise ValueError(f"current support must have size k={k}")
    q = int(rng.integers(2 * k, 3 * k + 1))

    keep = support | {0}
    needed = q - len(keep)
    v = d.copy()
    for idx in support:
        if 1 <= idx <= n - 1:
            v[idx - 1] = 0.0
    positive = np.flatnonzero(v > 0)

    chosen: list = []
    if needed > 0:
        if positive.size >= needed:
            p = v / v.sum()
            chosen = list(rng.choice(d.size, size=needed, replace=False, p=p))
        else:
            chosen = list(positive)
            blocked = set(positive.tolist()) | {i - 1 for i in support if 1 <= i <= n - 1}
            pool = np.asarray([i for i in range(d.size) if i not in blocked], dtype=int)
            pad = needed - positive.size
            logger.debug(
                "resample: only %d positive-probability positions for %d slots; padding uniformly",
                positive.size, needed,
            )
            if pad > pool.size:
                raise ValueError("not enough indices to build an extended support of the requested size")
            chosen += list(rng.choice(pool, size=pad, replace=False))

    indices = frozenset(keep | {int(i) + 1 for i in chosen})
    return ExtendedSupport(indices=indices, q=len(indices))


def _validate_simplex(d: np.ndarray, n: int) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.shape != (n - 1,):
        raise ValueError(f"estimator output must have shape ({n - 1},), got {d.shape}")
    if np.any(d < -1e-9) or abs(d.sum() - 1.0) > 1e-6:
        raise ValueError("estimator output is not on the probability simplex")
    return np.clip(d, 0.0, None)


def pred(
    problem: PhaseProblem,
    k: int,
    estimator: Callable[[np.ndarray], np.ndarray],
    cfg: PredConfig | None = None,
    rng: np.random.Generator | None = None,
) -> PredResult:
    """Iterative retrieval driven by an estimator's support probabilities.

    The estimator maps the measurement vector to a simplex vector of length
    n-1 and is queried once.  Iterations run TSE on the current proposal,
    stop when the l1 residual drops to epsilon, and otherwise resample the
    proposal around the current support.  Returns the history argmin of the
    squared objective; stats.eta counts Gauss-Newton executions (2 per TSE).
    """
    cfg = cfg or PredConfig()
    if rng is None:
        rng = np.random.default_rng()
    d = _validate_simplex(estimator(problem.y), problem.n)

    stats = PredStats()
    best = None
    extended = init_extended(d, k, rng)

    for t in range(1, cfg.kappa_iter + 1):
        stats.iterations = t
        x_t, support = tse(problem, k, extended, cfg.gn, rng)
        stats.eta += 2
        v = magnitudes(x_t, problem.m)
        residual_l1 = float(np.sum(np.abs(problem.y - v)))
        g = float(np.sum((problem.y - v) ** 2))
        stats.history.append((extended.q, tuple(int(i) for i in support), g, residual_l1))
        if best is None or g < best[2]:
            best = (x_t, support, g)
        if residual_l1 <= cfg.epsilon:
            break
        extended = resample_extended(d, support, k, rng)

    x_best, support_best, g_best = best
    stats.best_objective = g_best
    return PredResult(x=x_best, support=np.sort(np.asarray(support_best)), stats=stats)
