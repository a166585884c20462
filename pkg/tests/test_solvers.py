import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexcast.solvers import (
    ConvergenceError,
    MixedProblem,
    RankDeficiencyError,
    adaptive_weights,
    fit_lasso_cd,
    fit_mixed_two_step,
    fit_quantile,
    fit_ridge,
    lambda_max,
    lasso_objective,
    mixed_lambda_max,
    pinball_loss,
)
from oracles import lasso_kkt_violation, mixed_fista, normal_equations, quantile_linprog


def random_problem(seed, n=None, p=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(15, 51))
    p = p or int(rng.integers(2, 11))
    X = rng.normal(size=(n, p))
    y = X @ (rng.normal(size=p) * (rng.random(p) > 0.4)) + rng.normal(size=n)
    return X, y


class TestRidge:
    def test_identity_design(self):
        y = np.array([1.0, -2.0, 4.0])
        assert np.allclose(fit_ridge(np.eye(3), y, 1.0, np.ones(3, bool)), y / 2)

    def test_ols(self):
        X = np.c_[np.ones(4), [0.0, 1, 2, 3]]
        assert np.allclose(fit_ridge(X, 1 + 2 * X[:, 1]), [1, 2])

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_normal_equations(self, seed):
        X, y = random_problem(seed)
        lam = float(np.random.default_rng(seed).uniform(0, 5))
        mask = np.ones(X.shape[1], bool)
        assert np.allclose(fit_ridge(X, y, lam, mask), normal_equations(X, y, lam), atol=1e-8, rtol=0)

    def test_rank_deficiency_names_columns(self):
        X = np.c_[np.ones(5), np.arange(5.0), 2 * np.arange(5.0)]
        with pytest.raises(RankDeficiencyError, match="b|c") as info:
            fit_ridge(X, np.arange(5.0), column_names=["a", "b", "c"])
        assert len(info.value.dependent_columns) == 1

    def test_penalty_rescues_collinear(self):
        X = np.c_[np.ones(5), np.arange(5.0), 2 * np.arange(5.0)]
        coef = fit_ridge(X, np.arange(5.0), 1.0)
        assert np.isclose(coef[1] * 2, coef[2])  # the ridge splits weight in proportion

    @given(st.integers(0, 10_000), st.floats(-10, 10).filter(lambda a: abs(a) > 1e-3))
    @settings(max_examples=50, deadline=None)
    def test_linear_in_target(self, seed, a):
        X, y = random_problem(seed)
        b = fit_ridge(X, y, 0.7, np.ones(X.shape[1], bool))
        assert np.allclose(fit_ridge(X, a * y, 0.7, np.ones(X.shape[1], bool)), a * b, atol=1e-9)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            fit_ridge(np.ones((3, 1)), [1, 2])
        with pytest.raises(ValueError):
            fit_ridge(np.ones((3, 1)), [1, 2, np.nan])
        with pytest.raises(ValueError):
            fit_ridge(np.ones((3, 1)), [1, 2, 3], -1.0)


class TestLasso:
    @pytest.mark.parametrize("seed", range(30))
    def test_kkt(self, seed):
        X, y = random_problem(seed)
        lam = lambda_max(X, y) * np.random.default_rng(seed).uniform(0.01, 0.9)
        coef = fit_lasso_cd(X, y, lam)
        assert lasso_kkt_violation(X, y, coef, lam) < 1e-6

    def test_weighted_kkt_with_free_column(self):
        X, y = random_problem(3, n=40, p=6)
        X[:, 0] = 1.0
        w = np.array([0.0, 1, 2, 0.5, 1, 3])
        lam = 0.3 * lambda_max(X, y, w)
        coef = fit_lasso_cd(X, y, lam, w)
        assert lasso_kkt_violation(X, y, coef, lam, w) < 1e-6

    def test_lambda_max_zeroes_everything(self):
        X, y = random_problem(7)
        assert np.all(fit_lasso_cd(X, y, lambda_max(X, y)) == 0)

    def test_lambda_max_value(self):
        X = np.array([[1.0, 0.0], [0.0, 2.0]])
        y = np.array([3.0, 1.0])
        assert lambda_max(X, y) == 1.5  # max(|3|, |2|) / 2

    def test_lambda_max_needs_penalized(self):
        with pytest.raises(ValueError):
            lambda_max(np.ones((3, 1)), np.ones(3), np.zeros(1))

    def test_zero_penalty_is_ols(self):
        X, y = random_problem(11, n=50, p=5)
        assert np.allclose(fit_lasso_cd(X, y, 0.0), np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-6)

    def test_objective_non_increasing(self):
        X, y = random_problem(5, n=50, p=10)
        X[:, 1] = X[:, 0] + 0.05 * X[:, 1]  # correlated, slow to converge
        trace = []
        fit_lasso_cd(X, y, 0.05 * lambda_max(X, y), trace=trace)
        assert len(trace) > 1
        assert np.all(np.diff(trace) <= 1e-12 * max(abs(trace[0]), 1.0))

    def test_convergence_error_carries_iterate(self):
        X, y = random_problem(5, n=50, p=10)
        X[:, 1] = X[:, 0] + 1e-3 * X[:, 1]
        with pytest.raises(ConvergenceError) as info:
            fit_lasso_cd(X, y, 1e-4 * lambda_max(X, y), max_iter=2)
        assert info.value.coef.shape == (10,)

    def test_objective_helper(self):
        X = np.eye(2)
        assert lasso_objective(X, [1.0, 1.0], np.array([1.0, 0.0]), 0.5) == pytest.approx(0.25 + 0.5)

    @given(st.integers(0, 10_000), st.floats(0.01, 0.99))
    @settings(max_examples=40, deadline=None)
    def test_kkt_property(self, seed, frac):
        X, y = random_problem(seed)
        lam = frac * lambda_max(X, y)
        assert lasso_kkt_violation(X, y, fit_lasso_cd(X, y, lam), lam) < 1e-6


class TestAdaptiveWeights:
    def test_reciprocal_of_initial_estimate(self):
        X = np.eye(3)
        y = np.array([2.0, 0.5, 4.0])
        w = adaptive_weights(X, y, lambda2=1e-12)
        assert np.allclose(w, 1 / (np.abs(y) + 1e-8), rtol=1e-6)

    def test_gamma_and_free_column(self):
        X = np.c_[np.ones(4), np.eye(4)[:, :2]]
        y = np.array([3.0, 5.0, 1.0, 1.0])
        w = adaptive_weights(X, y, gamma=2.0, lambda2=1e-12)
        assert w[0] == 0.0
        assert np.allclose(w[1:], [1 / 4.0, 1 / 16.0], rtol=1e-6)


class TestMixed:
    @staticmethod
    def problem(seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(20, 51))
        m0, m1, m2 = int(rng.integers(1, 3)), int(rng.integers(1, 6)), int(rng.integers(0, 4))
        X0 = np.c_[np.ones(n), rng.normal(size=(n, m0 - 1))]
        X1, X2 = rng.normal(size=(n, m1)), rng.normal(size=(n, m2))
        y = X0 @ rng.normal(size=m0) + X1 @ (rng.normal(size=m1) * (rng.random(m1) > 0.5)) + rng.normal(size=n)
        mp = MixedProblem(X0, X1, X2, y, 0.0, float(rng.uniform(0.1, 5)), rng.uniform(0.5, 2, m1))
        mp.lambda1 = float(rng.uniform(0.05, 0.8)) * mixed_lambda_max(mp)
        return mp

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_joint_oracle(self, seed):
        mp = self.problem(seed)
        f_two = mp.objective(*fit_mixed_two_step(mp))
        *_, f_ref = mixed_fista(mp.X0, mp.X1, mp.X2, mp.y, mp.lambda1, mp.lambda2, mp.weights1)
        assert (f_two - f_ref) / abs(f_ref) < 1e-5

    def test_no_free_blocks_equals_lasso(self):
        X, y = random_problem(2, n=40, p=5)
        mp = MixedProblem(None, X, None, y, 3.0)
        _, b1, _ = fit_mixed_two_step(mp)
        assert np.allclose(b1, fit_lasso_cd(X, y, 3.0 / (2 * 40)), atol=1e-10)

    def test_huge_l1_is_ridge(self):
        mp = self.problem(4)
        mp.lambda1 = 10 * mixed_lambda_max(mp)
        b0, b1, b2 = fit_mixed_two_step(mp)
        assert np.all(b1 == 0)
        X02 = np.hstack([mp.X0, mp.X2])
        mask = np.r_[np.zeros(mp.X0.shape[1], bool), np.ones(mp.X2.shape[1], bool)]
        assert np.allclose(np.r_[b0, b2], normal_equations(X02, mp.y, mp.lambda2, mask), atol=1e-9)

    def test_lambda_max_boundary(self):
        mp = self.problem(6)
        lmax = mixed_lambda_max(mp)
        mp.lambda1 = lmax * 1.0001
        assert np.all(fit_mixed_two_step(mp)[1] == 0)
        mp.lambda1 = lmax * 0.9
        assert np.any(fit_mixed_two_step(mp)[1] != 0)

    def test_collinear_free_block(self):
        n = 10
        X0 = np.c_[np.ones(n), np.ones(n)]
        with pytest.raises(RankDeficiencyError):
            fit_mixed_two_step(MixedProblem(X0, np.eye(n)[:, :2], None, np.arange(n, dtype=float), 1.0))

    def test_validation(self):
        with pytest.raises(ValueError):
            MixedProblem(np.ones((3, 1)), np.ones((4, 1)), None, np.ones(3), 1.0)
        with pytest.raises(ValueError):
            MixedProblem(None, np.ones((3, 1)), None, np.ones(3), -1.0)


class TestQuantile:
    def test_median_of_constant_design(self):
        y = np.array([1.0, 2.0, 3.0, 10.0, 100.0])
        assert fit_quantile(np.ones((5, 1)), y, 0.5)[0] == pytest.approx(3.0, abs=1e-3)

    def test_upper_quantile(self):
        y = np.arange(1.0, 101.0)
        q = fit_quantile(np.ones((100, 1)), y, 0.9)[0]
        assert 90.0 - 1e-3 <= q <= 91.0 + 1e-3

    def test_symmetric_noise_close_to_ols(self):
        rng = np.random.default_rng(0)
        n = 2000
        X = np.c_[np.ones(n), rng.normal(size=n)]
        y = X @ [1.0, 2.0] + rng.normal(size=n)
        q = fit_quantile(X, y, 0.5)
        ols = np.linalg.lstsq(X, y, rcond=None)[0]
        se = np.sqrt(np.diag(np.linalg.inv(X.T @ X)))
        assert np.all(np.abs(q - ols) < 3 * se)

    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("tau", [0.1, 0.5, 0.8])
    def test_matches_linear_program(self, seed, tau):
        rng = np.random.default_rng(seed)
        X = np.c_[np.ones(60), rng.normal(size=(60, 2))]
        y = X @ [1.0, -1.0, 0.5] + rng.standard_t(3, size=60)
        _, f_ref = quantile_linprog(X, y, tau)
        f = float(np.mean(pinball_loss(y - X @ fit_quantile(X, y, tau), tau)))
        assert f - f_ref <= 1e-6 * max(1.0, f_ref)

    def test_pinball(self):
        assert pinball_loss([2.0, -2.0], 0.25).tolist() == [0.5, 1.5]

    def test_tau_range(self):
        with pytest.raises(ValueError):
            fit_quantile(np.ones((3, 1)), [1, 2, 3], 1.0)
