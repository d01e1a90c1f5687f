"""Tests for autocorrelation support constraints and the GESPAR search."""

import math

import numpy as np
import pytest

from sparsephase.gauss_newton import GnConfig
from sparsephase.gespar import (
    GesparConfig,
    SupportConstraints,
    autocorr_support_sets,
    gespar,
)
from sparsephase.signals import (
    UNIFORM,
    PhaseProblem,
    SparseSignal,
    forward_magnitudes,
    magnitudes,
    make_problem,
    recovery_metrics,
    sample_signal,
    ues,
)


def difference_set_universe(support):
    """Oracle: allowed positions from the pairwise-difference set of T."""
    t = np.asarray(sorted(support))
    diffs = {abs(int(a) - int(b)) for a in t for b in t}
    span = int(t.max() - t.min())
    v2 = {p for p in range(span + 1) if p in diffs and (span - p) in diffs}
    return span, v2


def signal_with_support(n, support, rng):
    values = np.zeros(n)
    u = rng.uniform(-0.8, 0.8, size=len(support))
    values[np.asarray(support)] = np.where(u < 0, u - 0.2, u + 0.2)
    return SparseSignal(n=n, values=values, support=np.asarray(support))


def noiseless_problem(signal, m):
    c = forward_magnitudes(signal, m)
    return PhaseProblem(n=signal.n, m=m, y=c, c=c, w=np.zeros(m), snr_db=math.inf)


class TestAutocorrSupportSets:
    def test_single_spike(self):
        rng = np.random.default_rng(0)
        sig = signal_with_support(16, [7], rng)
        prob = noiseless_problem(sig, 17)
        cons = autocorr_support_sets(prob, 1)
        assert cons.v1 == cons.v2 == frozenset({0})

    def test_contiguous_pair(self):
        rng = np.random.default_rng(1)
        sig = signal_with_support(6, [1, 2], rng)
        prob = noiseless_problem(sig, 7)
        cons = autocorr_support_sets(prob, 2)
        assert cons.v1 == cons.v2 == frozenset({0, 1})

    def test_matches_difference_oracle_for_modest_spans(self):
        # spans at most (m-1)/2 keep the circular autocorrelation alias-free
        rng = np.random.default_rng(2)
        n, m = 32, 33
        checked = 0
        while checked < 40:
            k = int(rng.integers(2, 5))
            support = np.sort(rng.choice(n, size=k, replace=False))
            if support.max() - support.min() > (m - 1) // 2:
                continue
            sig = signal_with_support(n, support, rng)
            prob = noiseless_problem(sig, m)
            cons = autocorr_support_sets(prob, k)
            span, v2_oracle = difference_set_universe(support)
            assert cons.v2 == frozenset(v2_oracle), support
            assert cons.v1 == frozenset({0, span})
            assert ues(support, n).alpha <= cons.v2
            checked += 1

    def test_noisy_constraints_still_contain_alpha(self):
        rng = np.random.default_rng(3)
        n, m = 32, 33
        hits = 0
        done = 0
        while done < 25:
            sig = sample_signal(UNIFORM, n, 3, rng)
            if sig.support.max() - sig.support.min() > (m - 1) // 2:
                continue
            prob = make_problem(sig, m, 30.0, rng)
            cons = autocorr_support_sets(prob, 3)
            hits += ues(sig.support, n).alpha <= cons.v2
            done += 1
        assert hits >= 20  # noise can hide weak lags; most should survive

    def test_degenerate_measurements(self):
        prob = PhaseProblem(n=4, m=5, y=np.zeros(5), c=np.zeros(5), w=np.zeros(5), snr_db=10.0)
        with pytest.raises(ValueError):
            autocorr_support_sets(prob, 2)

    def test_threshold_relaxation_reaches_k(self):
        # an over-aggressive threshold shrinks v2; relaxation must recover it
        rng = np.random.default_rng(4)
        sig = signal_with_support(24, [3, 7, 12], rng)
        prob = noiseless_problem(sig, 25)
        cons = autocorr_support_sets(prob, 3, rel_threshold=0.9)
        assert len(cons.v2) >= 3

    def test_v1_subset_of_v2_enforced(self):
        with pytest.raises(ValueError):
            SupportConstraints(v1=frozenset({0, 9}), v2=frozenset({0, 1}))


class TestWraparoundAmbiguity:
    def test_distinct_classes_share_measurements(self):
        # With m = n + 1, rotating the padded support around the end produces
        # a different shift/reflection class with identical measurements, so
        # no solver can identify the class from y alone.
        x1 = np.zeros(8)
        x1[[0, 1, 3]] = [0.9, 0.5, -0.8]
        x2 = np.zeros(8)
        x2[[0, 6, 7]] = [-0.8, 0.9, 0.5]
        np.testing.assert_allclose(magnitudes(x1, 9), magnitudes(x2, 9), atol=1e-12)
        hit, _ = recovery_metrics({0, 6, 7}, {0, 1, 3}, 3)
        assert hit == 0


class TestGespar:
    def test_early_exit_after_one_solve(self):
        rng = np.random.default_rng(5)
        sig = signal_with_support(12, [0, 4], rng)
        prob = noiseless_problem(sig, 13)
        cfg = GesparConfig(kappa_iter=50, epsilon=1e30)  # any point satisfies it
        result = gespar(prob, 2, cfg, np.random.default_rng(6))
        assert result.stats.eta == 1

    def test_eta_matches_history_length(self):
        rng = np.random.default_rng(7)
        sig = sample_signal(UNIFORM, 20, 3, rng)
        prob = make_problem(sig, 21, 20.0, rng)
        cfg = GesparConfig(kappa_iter=20, epsilon=0.0)
        result = gespar(prob, 3, cfg, rng)
        assert result.stats.eta == len(result.stats.history)
        assert result.stats.eta >= 1

    def test_visited_supports_respect_constraints(self):
        rng = np.random.default_rng(8)
        sig = sample_signal(UNIFORM, 24, 3, rng)
        prob = make_problem(sig, 25, 25.0, rng)
        cons = autocorr_support_sets(prob, 3)
        cfg = GesparConfig(kappa_iter=15)
        result = gespar(prob, 3, cfg, rng)
        for support, _ in result.stats.history:
            s = set(support)
            assert len(s) == 3
            assert cons.v1 <= s <= cons.v2

    def test_returns_history_argmin(self):
        rng = np.random.default_rng(9)
        sig = sample_signal(UNIFORM, 24, 3, rng)
        prob = make_problem(sig, 25, 20.0, rng)
        result = gespar(prob, 3, GesparConfig(kappa_iter=15), rng)
        best = min(obj for _, obj in result.stats.history)
        assert result.stats.best_objective == pytest.approx(best)

    def test_recovery_rate_unambiguous_spans(self):
        # Instances whose span stays below m/2 have an alias-free
        # autocorrelation, isolating the search quality from the inherent
        # wraparound ambiguity of m = n + 1 measurements.
        rng = np.random.default_rng(10)
        n, m = 24, 25
        hits = 0
        trials = 40
        done = 0
        while done < trials:
            support = np.sort(rng.choice(n, size=2, replace=False))
            if support.max() - support.min() > (m - 1) // 2:
                continue
            sig = signal_with_support(n, support, rng)
            prob = noiseless_problem(sig, m)
            cfg = GesparConfig(kappa_iter=500, epsilon=1e-16)
            result = gespar(prob, 2, cfg, rng)
            hit, _ = recovery_metrics(result.support, sig.support, 2)
            hits += hit
            done += 1
        assert hits >= 0.95 * trials

    def test_recovery_rate_uniform_supports_hits_information_bound(self):
        # Unconditioned uniform supports: self-consistent solutions from the
        # wraparound ambiguity cap the hit rate near 3/4 for k=2.
        rng = np.random.default_rng(11)
        n, m = 24, 25
        hits = 0
        trials = 40
        for _ in range(trials):
            sig = sample_signal(UNIFORM, n, 2, rng)
            prob = noiseless_problem(sig, m)
            cfg = GesparConfig(kappa_iter=200, epsilon=1e-16)
            result = gespar(prob, 2, cfg, rng)
            hit, _ = recovery_metrics(result.support, sig.support, 2)
            hits += hit
        assert hits >= 0.55 * trials

    def test_matches_exhaustive_search_small(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            sig = sample_signal(UNIFORM, 12, 2, rng)
            prob = noiseless_problem(sig, 13)
            cfg = GesparConfig(kappa_iter=100, epsilon=1e-16)
            result = gespar(prob, 2, cfg, rng)
            # exhaustive oracle over all k-subsets of v2 containing v1
            from itertools import combinations

            from sparsephase.gauss_newton import dgn

            cons = autocorr_support_sets(prob, 2)
            best_obj, best_support = math.inf, None
            for cand in combinations(sorted(cons.v2), 2):
                if not cons.v1 <= set(cand):
                    continue
                for trial in range(5):
                    res = dgn(prob, cand, GnConfig(), rng=np.random.default_rng(trial))
                    if res.objective < best_obj:
                        best_obj, best_support = res.objective, cand
            if best_obj < 1e-8:
                hit, _ = recovery_metrics(result.support, best_support, 2)
                assert hit == 1
