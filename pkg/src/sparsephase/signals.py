"""Sparse signal model and Fourier magnitude measurements.

A k-sparse real signal of length n is observed through the squared
magnitudes of its m-point discrete Fourier transform (m >= n), optionally
corrupted by nonnegative chi-squared noise calibrated to a target SNR.

Indexing convention: everything in this package is 0-based.  The JSON
interchange format produced by :func:`problem_to_json` (and the CLI) uses
1-based support indices; see README.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np

UNIFORM = "uniform"
GAUSSIAN = "gaussian"
PRIORS = (UNIFORM, GAUSSIAN)


@functools.lru_cache(maxsize=16)
def dft_matrix(n: int, m: int) -> np.ndarray:
    """m x n DFT matrix F with F[i, j] = exp(-2*pi*1j*i*j/m).

    Cached per (n, m); treat the returned array as read-only.
    """
    if m < n:
        raise ValueError(f"DFT length m={m} must be >= signal length n={n}")
    i = np.arange(m)[:, None]
    j = np.arange(n)[None, :]
    return np.exp(-2j * np.pi * (i * j) / m)


def magnitudes(values: np.ndarray, m: int) -> np.ndarray:
    """Squared magnitudes of the m-point DFT of a real vector (zero-padded)."""
    values = np.asarray(values, dtype=float)
    if m < values.shape[0]:
        raise ValueError(f"DFT length m={m} must be >= signal length {values.shape[0]}")
    spectrum = np.fft.fft(values, n=m)
    return np.abs(spectrum) ** 2


@dataclass(frozen=True)
class SparseSignal:
    """Real length-n vector with exactly k nonzeros on `support`."""

    n: int
    values: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        support = np.asarray(np.sort(self.support), dtype=np.int64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "support", support)
        if values.shape != (self.n,):
            raise ValueError(f"values must have shape ({self.n},)")
        if support.size == 0 or support.min() < 0 or support.max() >= self.n:
            raise ValueError("support must be a nonempty subset of [0, n)")
        if np.unique(support).size != support.size:
            raise ValueError("support indices must be distinct")
        nz = np.flatnonzero(values)
        if not np.array_equal(nz, support):
            raise ValueError("values must be nonzero exactly on the support")

    @property
    def k(self) -> int:
        return int(self.support.size)


@dataclass(frozen=True)
class PhaseProblem:
    """Measurement instance: y = c + w with c the clean squared magnitudes."""

    n: int
    m: int
    y: np.ndarray
    c: np.ndarray
    w: np.ndarray
    snr_db: float

    def __post_init__(self):
        for name in ("y", "c", "w"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if arr.shape != (self.m,):
                raise ValueError(f"{name} must have shape ({self.m},)")
            if np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")
        if self.m < self.n:
            raise ValueError(f"m={self.m} must be >= n={self.n}")
        if not np.allclose(self.y, self.c + self.w, rtol=0, atol=1e-12 * max(1.0, float(self.c.max(initial=0.0)))):
            raise ValueError("y must equal c + w elementwise")


def forward_magnitudes(signal: SparseSignal, m: int) -> np.ndarray:
    """Clean measurements c[i] = |sum_{j in T} x[j] exp(-2*pi*1j*i*j/m)|^2."""
    if m < signal.n:
        raise ValueError(f"m={m} must be >= n={signal.n}")
    return magnitudes(signal.values, m)


def sample_signal(prior: str, n: int, k: int, rng: np.random.Generator) -> SparseSignal:
    """Draw a k-sparse signal with a uniform support and i.i.d. nonzeros.

    prior "uniform": nonzeros uniform on [-1, -0.2] u [0.2, 1].
    prior "gaussian": standard normal nonzeros.
    """
    if not 1 <= k <= n:
        raise ValueError(f"sparsity k={k} must satisfy 1 <= k <= n={n}")
    if prior not in PRIORS:
        raise ValueError(f"unknown prior {prior!r}; expected one of {PRIORS}")
    support = np.sort(rng.choice(n, size=k, replace=False))
    if prior == UNIFORM:
        u = rng.uniform(-0.8, 0.8, size=k)
        nonzeros = np.where(u < 0, u - 0.2, u + 0.2)
    else:
        nonzeros = rng.standard_normal(k)
        while np.any(nonzeros == 0.0):  # keep the support exact
            nonzeros[nonzeros == 0.0] = rng.standard_normal(np.count_nonzero(nonzeros == 0.0))
    values = np.zeros(n)
    values[support] = nonzeros
    return SparseSignal(n=n, values=values, support=support)


def sample_noise(c: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Nonnegative noise w[i] ~ sigma * chi^2(2), calibrated so the expected
    SNR 10*log10(sum c / sum w) equals snr_db.

    chi^2(2) has mean 2, so sigma = sum(c) * 10^(-snr_db/10) / (2m).
    snr_db = +inf is the noiseless sentinel and returns zeros.
    """
    c = np.asarray(c, dtype=float)
    m = c.shape[0]
    if np.any(c < 0) or c.sum() <= 0:
        raise ValueError("c must be nonnegative and not all zero")
    if math.isinf(snr_db):
        return np.zeros(m)
    sigma = c.sum() * 10.0 ** (-snr_db / 10.0) / (2.0 * m)
    return sigma * rng.chisquare(2, size=m)


def make_problem(signal: SparseSignal, m: int, snr_db: float, rng: np.random.Generator) -> PhaseProblem:
    """Measure a signal: clean magnitudes plus calibrated chi-squared noise."""
    c = forward_magnitudes(signal, m)
    w = sample_noise(c, snr_db, rng)
    return PhaseProblem(n=signal.n, m=m, y=c + w, c=c, w=w, snr_db=snr_db)


@dataclass(frozen=True, eq=False)
class UESet:
    """Shift/reflection-invariant signature of a support.

    alpha: support shifted so its minimum lands at 0.
    beta:  support reflected so its maximum lands at 0.
    union_set = alpha | beta; union_minus_zero = union_set - {0}.

    Two UESets are equal when they describe the same equivalence class:
    reflection swaps alpha and beta, so equality ignores their order.
    """

    alpha: frozenset
    beta: frozenset
    union_set: frozenset
    union_minus_zero: frozenset

    def __eq__(self, other):
        if not isinstance(other, UESet):
            return NotImplemented
        return {self.alpha, self.beta} == {other.alpha, other.beta}

    def __hash__(self):
        return hash(frozenset((self.alpha, self.beta)))


def ues(support, n: int) -> UESet:
    """Union of the shift- and reflection-normalized forms of a support."""
    idx = np.asarray(sorted(support), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("support must be nonempty")
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError(f"support must lie within [0, {n})")
    alpha = frozenset((idx - idx.min()).tolist())
    beta = frozenset((idx.max() - idx).tolist())
    union = alpha | beta
    return UESet(alpha=alpha, beta=beta, union_set=union, union_minus_zero=union - {0})


def recovery_metrics(estimate, truth, k: int) -> tuple:
    """Support recovery scores modulo shift and reflection.

    hit  = 1 iff the normalized estimate matches the normalized truth or its
           reflection; soft = best overlap fraction of the two alignments.
    """
    est = sorted(estimate)
    tru = sorted(truth)
    if len(est) != k or len(tru) != k:
        raise ValueError(f"estimate and truth must both have size k={k}")
    n = max(max(est), max(tru)) + 1
    u_t = ues(tru, n)
    u_s = ues(est, n)
    hit = int(u_t.alpha == u_s.alpha or u_t.alpha == u_s.beta)
    soft = max(len(u_t.alpha & u_s.alpha), len(u_t.alpha & u_s.beta)) / k
    return hit, soft


def _float_or_inf(x) -> float:
    if isinstance(x, str) and x.lower() in ("inf", "+inf", "infinity"):
        return math.inf
    return float(x)


def _snr_json(snr_db: float):
    return "inf" if math.isinf(snr_db) else snr_db


def problem_to_json(signal: SparseSignal, problem: PhaseProblem, seed: int) -> str:
    """Serialize an instance to JSON.  Support indices are 1-based on the
    wire; floats use Python's shortest decimal repr, which round-trips
    bit-exactly.  snr_db = +inf is encoded as the string "inf".
    """
    doc = {
        "n": signal.n,
        "m": problem.m,
        "k": signal.k,
        "snr_db": _snr_json(problem.snr_db),
        "seed": seed,
        "support": (signal.support + 1).tolist(),
        "values": signal.values[signal.support].tolist(),
        "y": problem.y.tolist(),
    }
    return json.dumps(doc)


def problem_from_json(text: str) -> tuple:
    """Inverse of :func:`problem_to_json`; returns (signal, problem, seed).

    The clean/noise split is not stored, so the reconstructed problem carries
    c = |F x|^2 recomputed from the signal and w = y - c (clamped at 0 for
    round-off).
    """
    doc = json.loads(text)
    n, m = int(doc["n"]), int(doc["m"])
    support = np.asarray(doc["support"], dtype=np.int64) - 1
    values = np.zeros(n)
    values[support] = np.asarray(doc["values"], dtype=float)
    signal = SparseSignal(n=n, values=values, support=support)
    y = np.asarray(doc["y"], dtype=float)
    c = forward_magnitudes(signal, m)
    w = np.maximum(y - c, 0.0)
    snr_db = _float_or_inf(doc["snr_db"])
    problem = PhaseProblem(n=n, m=m, y=y, c=np.minimum(c, y), w=w, snr_db=snr_db)
    return signal, problem, int(doc["seed"])
