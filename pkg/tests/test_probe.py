import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize
from scipy.special import expit

from gatebias import DataError
from gatebias import probe as P
from gatebias.discovery import discover

from conftest import oracle_sae


def brute_auroc(scores, y):
    pos, neg = scores[y == 1], scores[y == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def bfgs_oracle(X, y, l2):
    """Penalised NLL minimised by BFGS; independent of the Newton implementation."""
    n, p = X.shape

    def f(t):
        eta = X @ t[:p] + t[p]
        return np.mean(np.logaddexp(0, eta) - y * eta) + 0.5 * l2 * t[:p] @ t[:p]

    return minimize(f, np.zeros(p + 1), method="BFGS", options={"gtol": 1e-10}).x


class TestAuroc:
    def test_perfect_reversed_constant(self):
        y = np.array([0, 0, 1, 1])
        assert P.auroc([0.1, 0.2, 0.8, 0.9], y) == 1.0
        assert P.auroc([0.9, 0.8, 0.2, 0.1], y) == 0.0
        assert P.auroc([1, 1, 1, 1], y) == 0.5

    def test_single_class(self):
        with pytest.raises(DataError):
            P.auroc([1, 2], [1, 1])


class TestFitLogistic:
    def test_independent_labels(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((2000, 3))
        y = np.arange(2000) % 2
        m = P.fit_logistic(X, y)
        assert abs(m.b) <= 0.1 and np.linalg.norm(m.w) < 0.15 and m.converged

    def test_separable_with_penalty(self):
        X = np.linspace(-1, 1, 40)[:, None]
        y = (X[:, 0] > 0).astype(int)
        m = P.fit_logistic(X, y, l2=1e-3)
        assert np.isfinite(m.w).all() and m.converged
        assert P.auroc(m.decision_function(X), y) == 1.0

    def test_recovers_simulated_parameters(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(50000)
        y = (rng.random(50000) < expit(1.5 * x - 0.5)).astype(int)
        m = P.fit_logistic(x, y, l2=0.0)
        assert m.w[0] == pytest.approx(1.5, rel=0.05) and m.b == pytest.approx(-0.5, rel=0.05)

    @pytest.mark.parametrize("l2", [0.0, 0.01, 0.5])
    def test_matches_bfgs_oracle(self, l2):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((500, 3))
        y = (rng.random(500) < expit(X @ [1.0, -2.0, 0.5] + 0.3)).astype(int)
        m = P.fit_logistic(X, y, l2=l2)
        ref = bfgs_oracle(X, y, l2)
        assert np.allclose(np.append(m.w, m.b), ref, atol=1e-5)

    def test_default_l2(self):
        X = np.random.default_rng(1).standard_normal((50, 2))
        assert P.fit_logistic(X, np.arange(50) % 2).l2 == pytest.approx(1 / 50)

    def test_errors(self):
        with pytest.raises(DataError):
            P.fit_logistic(np.ones((5, 1)), np.ones(5))
        with pytest.raises(DataError):
            P.fit_logistic(np.ones((1, 1)), [1])
        with pytest.raises(DataError):
            P.fit_logistic(np.ones((4, 1)), [0, 1, 0, 1], l2=-1)
        with pytest.raises(DataError):
            P.fit_logistic(np.ones((4, 1)), [0, 1, 2, 1])

    def test_non_convergence_flag(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((200, 2))
        y = (rng.random(200) < expit(X[:, 0])).astype(int)
        m = P.fit_logistic(X, y, max_iter=1, tol=1e-14)
        assert not m.converged and m.n_iter == 1

    def test_width_mismatch(self):
        m = P.fit_logistic(np.random.default_rng(0).standard_normal((20, 2)), np.arange(20) % 2)
        with pytest.raises(DataError):
            m.decision_function(np.zeros((3, 3)))


class TestFolds:
    def test_ten_balanced_five_folds(self):
        y = np.array([1] * 5 + [0] * 5)
        f = P.stratified_folds(y, 5, seed=0)
        for k in range(5):
            assert y[f == k].sum() >= 1 and (1 - y[f == k]).sum() >= 1

    def test_too_few(self):
        with pytest.raises(DataError):
            P.stratified_folds(np.array([1, 1, 0, 0, 0, 0]), 3, 0)


class TestCurves:
    def test_shuffled_labels_near_chance(self, small_world):
        _, ds, gt = small_world
        sae = oracle_sae(gt, k=2, extra=16)
        C, _ = discover(ds, sae, 16)
        perm = np.random.default_rng(5).permutation(len(ds))
        shuffled = ds.with_labels(behavior=ds.behavior[perm])
        curve = P.cv_curves(shuffled, sae, C, [1, 2], folds=5, seed=0)
        for kind in ("DISCOVERED", "RANDOM", "RAW"):
            assert all(abs(v - 0.5) <= 0.05 for v in curve.mean[kind]), kind

    def test_raw_constant_and_layout(self, small_world, small_oracle):
        _, ds, _ = small_world
        C, _ = discover(ds, small_oracle, 4)
        curve = P.cv_curves(ds, small_oracle, C, [1], folds=3, seed=1)
        assert set(curve.mean) == {"DISCOVERED", "RANDOM", "RAW"}
        assert curve.to_json()["side"] == "CALL"

    def test_count_exceeds_features(self, small_world, small_oracle):
        _, ds, _ = small_world
        C, _ = discover(ds, small_oracle, 2)
        with pytest.raises(DataError, match="exceeds"):
            P.cv_curves(ds, small_oracle, C, [len(C) + 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(20, 200))
def test_rank_auroc_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 6, n).astype(float)
    y = rng.integers(0, 2, n)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    assert P.auroc(s, y) == pytest.approx(brute_auroc(s, y), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_auroc_invariant_under_increasing_transform(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(50)
    y = np.arange(50) % 2
    assert P.auroc(s, y) == P.auroc(np.exp(3 * s) + 7, y)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_objective_non_increasing(seed, l2):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((80, 3)) * [1, 5, 0.2]
    y = (rng.random(80) < expit(X @ [2.0, -1.0, 3.0])).astype(int)
    if y.min() == y.max():
        return
    tr = P.fit_logistic(X, y, l2=l2).trace
    assert all(b <= a for a, b in zip(tr, tr[1:]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_column_scaling_invariance_unpenalised(seed, c):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((300, 2))
    y = (rng.random(300) < expit(X @ [1.0, -0.5])).astype(int)
    a = P.fit_logistic(X, y, l2=0.0)
    Xs = X * [c, 1.0]
    b = P.fit_logistic(Xs, y, l2=0.0)
    assert np.allclose(a.predict_proba(X), b.predict_proba(Xs), atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_folds_partition_and_deterministic(seed, folds):
    y = np.random.default_rng(seed).integers(0, 2, 60)
    if min(y.sum(), 60 - y.sum()) < folds:
        return
    a = P.stratified_folds(y, folds, seed)
    assert np.array_equal(a, P.stratified_folds(y, folds, seed))
    assert set(np.unique(a)) == set(range(folds))


class TestCombinedSets:
    def test_interleave(self):
        from gatebias.discovery import FeatureScore, FeatureSet, Side

        mk = lambda side, ids: FeatureSet(side, tuple(FeatureScore(i, 0.0, 0.5) for i in ids), len(ids))
        assert P._interleave([mk(Side.CALL, [4, 1, 7]), mk(Side.NO_CALL, [2])]) == [4, 2, 1, 7]

    def test_combined_curve(self, small_world, small_oracle):
        _, ds, _ = small_world
        C, N = discover(ds, small_oracle, 4)
        both = P.cv_curves(ds, small_oracle, [C, N], [1, 2], folds=3, seed=1)
        one = P.cv_curves(ds, small_oracle, [C], [1, 2], folds=3, seed=1)
        assert both.side == P.COMBINED and one.side == "CALL"
        assert both.mean["DISCOVERED"][0] == one.mean["DISCOVERED"][0]
        assert both.mean["DISCOVERED"][1] > one.mean["DISCOVERED"][1]

    def test_empty_list(self, small_world, small_oracle):
        _, ds, _ = small_world
        with pytest.raises(DataError):
            P.cv_curves(ds, small_oracle, [], [1])
