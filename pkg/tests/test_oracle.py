import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uqshift.oracle import (ConjugateLinReg, OracleSamplerConfig, TwoModeConfig, TwoModeModel,
                            analytic_posterior, mode_visit_count, sghmc_vs_analytic, two_mode_csghmc,
                            two_mode_sgd)


def test_no_data_gives_prior():
    mean, cov = analytic_posterior(ConjugateLinReg(np.zeros((0, 2)), np.zeros(0), alpha=4.0))
    np.testing.assert_array_equal(mean, 0)
    np.testing.assert_array_equal(cov, np.eye(2) / 4)


def test_one_by_one():
    mean, cov = analytic_posterior(ConjugateLinReg([[1.0]], [2.0]))
    assert cov[0, 0] == pytest.approx(0.5) and mean[0] == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 12), st.floats(0.1, 5), st.floats(0.1, 5))
def test_matches_naive_inverse(seed, n, alpha, beta):
    r = np.random.default_rng(seed)
    X, y = r.normal(size=(n, 2)), r.normal(size=n)
    mean, cov = analytic_posterior(ConjugateLinReg(X, y, alpha, beta))
    a, b, c = alpha + beta * X[:, 0] @ X[:, 0], beta * X[:, 0] @ X[:, 1], alpha + beta * X[:, 1] @ X[:, 1]
    det = a * c - b * b
    naive_cov = np.array([[c, -b], [-b, a]]) / det
    naive_mean = naive_cov @ (beta * np.array([X[:, 0] @ y, X[:, 1] @ y]))
    np.testing.assert_allclose(cov, naive_cov, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(mean, naive_mean, rtol=1e-10, atol=1e-12)


def test_loss_gradient_is_exact():
    reg = ConjugateLinReg.synthetic(n=10)
    theta, idx, h = np.array([0.3, -0.2]), np.arange(10), 1e-6
    _, g = reg.loss_and_grad(theta, idx)
    for i in range(2):
        e = np.eye(2)[i] * h
        num = (reg.loss_and_grad(theta + e, idx)[0] - reg.loss_and_grad(theta - e, idx)[0]) / (2 * h)
        assert g[i] == pytest.approx(num, rel=1e-6)


def test_sghmc_recovers_moments():
    rep = sghmc_vs_analytic(ConjugateLinReg.synthetic(), OracleSamplerConfig())
    assert rep.num_draws >= 2000
    assert max(rep.mean_rel_err) < 0.05 and max(rep.cov_diag_rel_err) < 0.20
    assert rep.passed()


def test_huge_step_reported():
    rep = sghmc_vs_analytic(ConjugateLinReg.synthetic(), OracleSamplerConfig(lr_multiplier=10, steps=6000))
    assert rep.diverged and rep.failure_step is not None and not rep.passed()


class TestTwoMode:
    model = TwoModeModel.synthetic()

    def test_modes_symmetric(self):
        ll = self.model.log_likelihood(np.array([-1.0, 1.0, 0.0]))
        assert ll[0] == ll[1] > ll[2]
        w = np.linspace(0.2, 2, 2001)
        assert abs(w[np.argmax(self.model.log_likelihood(w))] - 1.0) < 1e-3

    def test_gradient(self):
        idx, h = np.arange(self.model.n), 1e-6
        for w in (-1.3, 0.4, 0.9):
            g = self.model.loss_and_grad(np.array([w]), idx)[1][0]
            num = (self.model.loss_and_grad(np.array([w + h]), idx)[0]
                   - self.model.loss_and_grad(np.array([w - h]), idx)[0]) / (2 * h)
            assert g == pytest.approx(num, rel=1e-6)

    def test_visit_count_trivial(self):
        assert mode_visit_count(self.model, [np.array([1.0]), np.array([0.9])]) == 1
        assert mode_visit_count(self.model, [np.array([1.0]), np.array([-1.0])]) == 2

    def test_csghmc_both_modes_sgd_one(self):
        cfg = TwoModeConfig()
        res = two_mode_csghmc(self.model, cfg, seed=0)
        assert len(res.samples) == cfg.cycles - cfg.burn_in_cycles >= 8
        assert mode_visit_count(self.model, res.samples) == 2
        assert mode_visit_count(self.model, [two_mode_sgd(self.model, cfg, 0).theta]) == 1
