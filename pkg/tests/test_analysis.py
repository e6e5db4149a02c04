import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from uqshift.analysis import (UncMap, aggregate_uncertainty, diversity_matrix, entropy_histogram,
                              pearson_matrix, select_members, spearman)
from uqshift.errors import EmptyResultError, ValidationError
from uqshift.models import ModelConfig, init
from uqshift.uq_methods import PosteriorEnsemble, predictive_entropy

import naive


class TestAggregate:
    def test_all_background_absent(self):
        z = np.zeros((4, 4), int)
        assert aggregate_uncertainty(UncMap(np.ones((4, 4)), z, z)) is None

    def test_uniform_single_pixel(self):
        gt = np.zeros((3, 3), int)
        gt[1, 1] = 2
        h = predictive_entropy(np.full((3, 3, 3), 1 / 3))
        assert aggregate_uncertainty(UncMap(h, np.zeros((3, 3), int), gt)) == pytest.approx(math.log(3))

    def test_hand_case(self):
        a, b, c, d = 0.1, 0.2, 0.6, 0.9
        ent = np.array([[a, b, c, d]])
        gt = np.array([[1, 2, 1, 0]])
        pred = np.array([[1, 2, 0, 0]])  # TP, TP, FN, TN
        assert aggregate_uncertainty(UncMap(ent, pred, gt)) == pytest.approx((a + b + c) / 3)

    def test_false_positive_counts(self):
        ent = np.array([[0.5, 0.9]])
        assert aggregate_uncertainty(UncMap(ent, np.array([[1, 0]]), np.array([[0, 0]]))) == 0.5


class TestHistogram:
    def test_single_value(self):
        assert entropy_histogram([0.4]).counts.sum() == 1

    def test_endpoints(self):
        np.testing.assert_array_equal(entropy_histogram([0.0, math.log(3)], num_bins=2).counts, [1, 1])

    def test_none_skipped_and_empty(self):
        assert entropy_histogram([None, 0.2, None]).counts.sum() == 1
        with pytest.raises(EmptyResultError):
            entropy_histogram([None, None])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 20))
    def test_matches_naive(self, seed, bins):
        vals = np.random.default_rng(seed).uniform(0, math.log(3), size=100)
        got = entropy_histogram(vals.tolist(), bins).counts
        assert got.tolist() == naive.histogram(vals.tolist(), bins, math.log(3))


class TestPearson:
    def test_identical(self):
        x = np.random.default_rng(0).random((1, 30))
        np.testing.assert_allclose(pearson_matrix(np.vstack([x, x])).matrix, 1.0)

    @given(st.floats(0.1, 10), st.floats(-5, 5))
    def test_affine_invariance(self, a, b):
        x = np.random.default_rng(0).random(30)
        assert pearson_matrix(np.vstack([x, a * x + b])).matrix[0, 1] == pytest.approx(1.0, abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6))
    def test_matches_naive(self, seed):
        x = np.random.default_rng(seed).random((3, 40))
        m = pearson_matrix(x).matrix
        for i in range(3):
            for j in range(3):
                ref = 1.0 if i == j else naive.pearson(x[i].tolist(), x[j].tolist())
                assert abs(m[i, j] - ref) < 1e-12

    def test_constant_member(self):
        x = np.vstack([np.ones(5), np.ones(5), np.arange(5.0)])
        res = pearson_matrix(x)
        assert res.degenerate == [0, 1]
        assert res.matrix[0, 1] == 1.0 and res.matrix[0, 2] == 0.0

    def test_mean_offdiag(self):
        x = np.random.default_rng(2).random((4, 10))
        m = pearson_matrix(x)
        assert m.mean_offdiag() == pytest.approx(m.matrix[~np.eye(4, dtype=bool)].mean())


class TestSpearman:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_matches_scipy(self, seed):
        r = np.random.default_rng(seed)
        x, y = r.integers(0, 5, size=9).astype(float), r.random(9)
        expected = stats.spearmanr(x, y).statistic
        if np.isnan(expected):
            assert np.isnan(spearman(x, y))
        else:
            assert spearman(x, y) == pytest.approx(expected, abs=1e-12)

    def test_monotone(self):
        assert spearman([1, 2, 3, 4], [0.1, 0.5, 0.7, 3.0]) == 1.0


def tiny_ensemble(method="DE", s=8):
    cfg = ModelConfig(base_channels=2, depth=1)
    thetas = [init(ModelConfig(base_channels=2, depth=1, seed=i)).flatten() for i in range(s)]
    return PosteriorEnsemble(method, cfg, thetas)


class TestDiversity:
    def test_last_members_for_csghmc(self):
        assert select_members(tiny_ensemble("cSGHMC"), 6, np.random.default_rng(0)) == [2, 3, 4, 5, 6, 7]

    def test_random_subset_seeded(self):
        e = tiny_ensemble()
        a = select_members(e, 6, np.random.default_rng(1))
        assert a == select_members(e, 6, np.random.default_rng(1)) and len(set(a)) == 6

    def test_subset_too_large(self):
        with pytest.raises(ValidationError):
            select_members(tiny_ensemble(s=3), 6, np.random.default_rng(0))

    def test_identical_members(self):
        e = tiny_ensemble(s=2)
        e.thetas[1] = e.thetas[0].copy()
        probe = np.random.default_rng(0).random((2, 1, 4, 4))
        np.testing.assert_allclose(diversity_matrix(e, probe, 2).matrix, 1.0)

    def test_distinct_members(self):
        probe = np.random.default_rng(0).random((2, 1, 4, 4))
        m = diversity_matrix(tiny_ensemble(), probe, 6, np.random.default_rng(0))
        assert m.matrix.shape == (6, 6) and m.mean_offdiag() < 1.0
