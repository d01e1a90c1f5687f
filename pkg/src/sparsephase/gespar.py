"""Greedy sparse phase retrieval (GESPAR) baseline.

The search space is restricted by two index sets derived from the
autocorrelation of the measurements: v1 (indices forced into every support
candidate) and v2 (the allowed universe).  A 2-opt local search swaps one
support index per iteration, re-solving with damped Gauss-Newton, with
random restarts when a swap fails to improve.

Note on identifiability: with m = n + 1 the circular autocorrelation of the
zero-padded signal aliases, and measurements are invariant under support
rotations that wrap around the padded end.  The span estimate below picks
the smallest span consistent with the detected lags, which is the most
probable reading under a uniform support prior but cannot always match the
generating support (distinct shift/reflection classes can share identical
measurements).  See README for details.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .gauss_newton import GnConfig, dgn, gradient
from .signals import PhaseProblem

logger = logging.getLogger(__name__)

_RELAX_LIMIT = 60  # threshold halvings before giving up on relaxation
_NOISELESS_REL_THRESHOLD = 1e-8


@dataclass(frozen=True)
class SupportConstraints:
    """v1: indices forced into every candidate; v2: allowed universe."""

    v1: frozenset
    v2: frozenset

    def __post_init__(self):
        if not self.v1 <= self.v2:
            raise ValueError("v1 must be a subset of v2")


@dataclass
class GesparConfig:
    kappa_iter: int = 500
    epsilon: float = 0.0
    gn: GnConfig = field(default_factory=GnConfig)
    autocorr_rel_threshold: float | None = None  # None: derived from SNR

    def __post_init__(self):
        if self.kappa_iter < 1:
            raise ValueError("kappa_iter must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")


@dataclass
class GesparStats:
    eta: int = 0  # number of inner Gauss-Newton solves
    iterations: int = 0
    best_objective: float = math.inf
    history: list = field(default_factory=list)  # (support tuple, objective)


@dataclass(frozen=True)
class GesparResult:
    x: np.ndarray
    support: np.ndarray
    stats: GesparStats


def _detected_lags(a_abs: np.ndarray, threshold: float, m: int) -> np.ndarray:
    """Circular lags in [0, m/2] whose autocorrelation magnitude clears the
    threshold (the autocorrelation of a real signal is symmetric, so half the
    lag range carries all the information)."""
    half = m // 2
    sym = 0.5 * (a_abs[: half + 1] + a_abs[(m - np.arange(half + 1)) % m])
    return np.flatnonzero(sym > threshold)


def _dealias_span(lags: np.ndarray, m: int, n: int) -> tuple:
    """Pick the smallest span consistent with the detected circular lags.

    Each circular lag l may come from a linear lag l or m - l.  A span
    hypothesis s is consistent when every detected lag is explainable as a
    linear lag <= s directly or through its alias.  Returns (span, linear lag
    set) or None when no hypothesis fits (cannot happen once lag 0 present).
    """
    candidates = sorted(
        {int(l) for l in lags if l <= n - 1} | {m - int(l) for l in lags if 0 < m - int(l) <= n - 1}
    )
    for s in candidates:
        ok = all(l <= s or m - l <= s for l in lags)
        if ok:
            linear = {int(l) for l in lags if l <= s} | {m - int(l) for l in lags if m - int(l) <= s}
            return s, linear
    return None


def autocorr_support_sets(
    problem: PhaseProblem, k: int, rel_threshold: float | None = None
) -> SupportConstraints:
    """Support constraints from the autocorrelation estimate Re(IDFT(y)).

    Detected lags above a noise threshold give the candidate difference set;
    the constrained universe keeps positions p with both p and span - p among
    the differences.  The threshold is relaxed by factors of 2 while the
    universe has fewer than k elements.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    m, n = problem.m, problem.n
    if problem.y.sum() <= 0:
        raise ValueError("degenerate measurements: y is all zero")
    a_abs = np.abs(np.real(np.fft.ifft(problem.y)))
    if rel_threshold is None:
        if math.isinf(problem.snr_db):
            rel_threshold = _NOISELESS_REL_THRESHOLD
        else:
            rel_threshold = 10.0 ** (-problem.snr_db / 20.0)
    peak = a_abs.max()

    for attempt in range(_RELAX_LIMIT + 1):
        threshold = rel_threshold * peak * 0.5**attempt
        lags = _detected_lags(a_abs, threshold, m)
        if lags.size == 0:
            continue
        span_info = _dealias_span(lags, m, n)
        if span_info is None:
            continue
        span, linear = span_info
        v2 = frozenset(p for p in range(span + 1) if p in linear and (span - p) in linear)
        v1 = frozenset({0, span}) if k >= 2 else frozenset({0})
        if len(v2) >= k and v1 <= v2:
            if attempt:
                logger.debug("autocorrelation threshold relaxed %d time(s)", attempt)
            return SupportConstraints(v1=v1, v2=v2)

    # All-relaxed fallback: unconstrained universe.
    logger.debug("autocorrelation constraints degenerate; falling back to full universe")
    v1 = frozenset({0}) if k >= 1 else frozenset()
    return SupportConstraints(v1=v1, v2=frozenset(range(n)))


def _random_support(constraints: SupportConstraints, k: int, rng: np.random.Generator) -> np.ndarray:
    v1 = np.fromiter(constraints.v1, dtype=np.int64)
    pool = np.fromiter(constraints.v2 - constraints.v1, dtype=np.int64)
    extra = rng.choice(pool, size=k - v1.size, replace=False) if k > v1.size else np.empty(0, np.int64)
    return np.sort(np.concatenate([v1, extra]))


def gespar(
    problem: PhaseProblem,
    k: int,
    cfg: GesparConfig | None = None,
    rng: np.random.Generator | None = None,
) -> GesparResult:
    """2-opt local search over supports with Gauss-Newton inner solves.

    Returns the (x, S) pair with the smallest objective among all visited
    iterations; stats.eta counts inner solver executions exactly.
    """
    cfg = cfg or GesparConfig()
    if rng is None:
        rng = np.random.default_rng()
    constraints = autocorr_support_sets(problem, k, cfg.autocorr_rel_threshold)
    if len(constraints.v2) < k:
        raise ValueError(f"infeasible constraints: |v2|={len(constraints.v2)} < k={k}")

    stats = GesparStats()
    best = None

    def solve(support):
        stats.eta += 1
        res = dgn(problem, support, cfg.gn, rng=rng)
        stats.history.append((tuple(int(i) for i in support), res.objective))
        return res

    def consider(support, res):
        nonlocal best
        if best is None or res.objective < best[1].objective:
            best = (support, res)

    support = _random_support(constraints, k, rng)
    res = solve(support)
    consider(support, res)

    if res.objective > cfg.epsilon:
        for t in range(cfg.kappa_iter):
            stats.iterations = t + 1
            swapped = _swap_support(support, res.x, problem, constraints, rng)
            if swapped is None:
                new_support, new_res = None, None
            else:
                new_support = swapped
                new_res = solve(new_support)
                consider(new_support, new_res)
            if new_res is None or new_res.objective >= res.objective:
                # local move failed to improve: random restart
                new_support = _random_support(constraints, k, rng)
                new_res = solve(new_support)
                consider(new_support, new_res)
            support, res = new_support, new_res
            if res.objective <= cfg.epsilon:
                break

    support, res = best
    stats.best_objective = res.objective
    return GesparResult(x=res.x, support=np.sort(np.asarray(support)), stats=stats)


def _swap_support(support, x, problem, constraints, rng):
    """One 2-opt move: drop the in-support index with the smallest magnitude
    (never from v1), insert the out-of-support candidate with the largest
    objective-gradient magnitude at the current point."""
    support_set = set(int(i) for i in support)
    removable = sorted(support_set - constraints.v1)
    insertable = sorted(constraints.v2 - support_set - constraints.v1)
    if not removable or not insertable:
        return None
    out_idx = removable[int(np.argmin(np.abs(x[removable])))]
    grad_full = gradient(x, range(problem.n), problem)
    in_idx = insertable[int(np.argmax(np.abs(grad_full[insertable])))]
    new = support_set - {out_idx} | {in_idx}
    return np.sort(np.fromiter(new, dtype=np.int64))
