"""Damped Gauss-Newton solver for the squared-magnitude fit objective.

Given measurements y and a candidate support S, the objective is

    g(x; S) = sum_i (y[i] - v_i(x; S))^2,     v_i(x; S) = |(F x)[i]|^2,

minimized over real x supported on S.  Each iteration linearizes v around
the current point, solves the resulting least-squares problem, and takes a
damped step chosen by backtracking so the objective never increases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signals import PhaseProblem, dft_matrix, magnitudes

# Beyond 40 halvings the step is below double-precision resolution.
_MAX_BACKTRACK = 40


@dataclass
class GnConfig:
    """Solver parameters.

    tau: stop once the step norm drops to tau.
    h: iteration budget.
    max_iters: hard cap, only reached in `require_min_iters` mode.
    initial_step: starting damping factor u in (0, 1].
    require_min_iters: if True, keep iterating until BOTH the step norm is
        below tau AND at least h iterations ran (capped at max_iters);
        default False stops at whichever comes first.
    """

    tau: float = 1e-4
    h: int = 100
    max_iters: int | None = None
    initial_step: float = 1.0
    require_min_iters: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.h < 1:
            raise ValueError("h must be a positive integer")
        if self.max_iters is None:
            self.max_iters = self.h
        if self.max_iters < self.h:
            raise ValueError("max_iters must be >= h")
        if not 0 < self.initial_step <= 1:
            raise ValueError("initial_step must lie in (0, 1]")


@dataclass(frozen=True)
class Linearization:
    """First-order model of the residual: row i of B is 2 x_S^T Re A_i(S),
    b[i] = y[i] + v_i(x).  Satisfies b - B x_S = y - v(x) exactly."""

    B: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class DgnResult:
    x: np.ndarray
    objective: float
    trace: np.ndarray  # objective value at every iterate, starting from init
    iterations: int


def _support_array(support, n: int) -> np.ndarray:
    idx = np.asarray(sorted(support), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("support must be nonempty")
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError(f"support must lie within [0, {n})")
    if np.unique(idx).size != idx.size:
        raise ValueError("support indices must be distinct")
    return idx


def objective(x: np.ndarray, support, problem: PhaseProblem) -> float:
    """g(x; S) evaluated from the full-length vector x (supported on S)."""
    _support_array(support, problem.n)
    v = magnitudes(np.asarray(x, dtype=float), problem.m)
    return float(np.sum((problem.y - v) ** 2))


def gradient(x: np.ndarray, support, problem: PhaseProblem) -> np.ndarray:
    """Gradient of g with respect to the entries of x on S (length |S|)."""
    idx = _support_array(support, problem.n)
    f_cols = dft_matrix(problem.n, problem.m)[:, idx]
    spectrum = f_cols @ np.asarray(x, dtype=float)[idx]
    r = np.abs(spectrum) ** 2 - problem.y
    return 4.0 * np.real(f_cols.conj().T @ (r * spectrum))


def linearize(x: np.ndarray, support, problem: PhaseProblem) -> Linearization:
    """Linear model (B, b) of the residual map around x, restricted to S."""
    idx = _support_array(support, problem.n)
    f_cols = dft_matrix(problem.n, problem.m)[:, idx]
    spectrum = f_cols @ np.asarray(x, dtype=float)[idx]
    B = 2.0 * np.real(spectrum.conj()[:, None] * f_cols)
    b = problem.y + np.abs(spectrum) ** 2
    return Linearization(B=B, b=b)


def dgn(
    problem: PhaseProblem,
    support,
    cfg: GnConfig | None = None,
    init: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> DgnResult:
    """Damped Gauss-Newton descent on g(.; S).

    The default initial point is standard normal on S (drawn from `rng`).
    Each accepted step satisfies the backtracking decrease condition, so the
    objective trace is non-increasing; rank-deficient least-squares systems
    are solved in the minimum-norm sense and never abort.
    """
    cfg = cfg or GnConfig()
    idx = _support_array(support, problem.n)
    y = problem.y

    if init is not None:
        init = np.asarray(init, dtype=float)
        off = np.setdiff1d(np.flatnonzero(init), idx)
        if off.size:
            raise ValueError("init must be supported on S")
        xs = init[idx].copy()
    else:
        if rng is None:
            raise ValueError("either init or rng must be provided")
        xs = rng.standard_normal(idx.size)

    f_cols = dft_matrix(problem.n, problem.m)[:, idx]

    def eval_g(vec):
        spectrum = f_cols @ vec
        v = np.abs(spectrum) ** 2
        return spectrum, v, float(np.sum((y - v) ** 2))

    spectrum, v, g_cur = eval_g(xs)
    trace = [g_cur]
    u = cfg.initial_step
    t = 0

    while True:
        B = 2.0 * np.real(spectrum.conj()[:, None] * f_cols)
        b = y + v
        # Minimum-norm least squares; rank tolerance relative to sigma_max.
        z, *_ = np.linalg.lstsq(B, b, rcond=1e-10)
        d = xs - z
        grad = 2.0 * (B.T @ (v - y))
        descent = float(grad @ d)
        if not np.isfinite(descent) or descent <= 0:
            break  # not a descent direction: stationary or degenerate

        accepted = False
        for a in range(_MAX_BACKTRACK + 1):
            delta = u * 0.5 ** a
            cand = xs - delta * d
            cand_spec, cand_v, g_new = eval_g(cand)
            if g_new < g_cur - 0.5 * delta * descent:
                accepted = True
                break
        if not accepted:
            break  # step of 0: terminate

        step_norm = delta * float(np.linalg.norm(d))
        xs, spectrum, v, g_cur = cand, cand_spec, cand_v, g_new
        trace.append(g_cur)
        u = min(2.0 * delta, 1.0)
        t += 1

        if cfg.require_min_iters:
            if (step_norm <= cfg.tau and t >= cfg.h) or t >= cfg.max_iters:
                break
        elif step_norm <= cfg.tau or t >= cfg.h:
            break

    x = np.zeros(problem.n)
    x[idx] = xs
    return DgnResult(x=x, objective=g_cur, trace=np.asarray(trace), iterations=t)
