import numpy as np
import pytest

import mcd.identifiability as ident
from mcd.identifiability import (LikelihoodMatrix, SvarComponent,
                                 check_condition_star, check_svar_condition,
                                 witness_matrix_from_loglik)

from oracles import gaussian_logpdf


def _svar(w=None, lagged=None, d=2, lag=1, var=1.0, mean=None, weight=1.0):
    w = np.zeros((d, d)) if w is None else np.asarray(w, dtype=float)
    lagged = np.zeros((lag, d, d)) if lagged is None else np.asarray(lagged)
    return SvarComponent(instantaneous=w, lagged=lagged, noise_var=var,
                         mean=mean, weight=weight)


class TestSvarCondition:
    def test_identical_components_not_identifiable(self):
        a = np.zeros((1, 2, 2))
        a[0, 0, 1] = 0.4
        c1 = _svar(lagged=a, weight=0.5)
        c2 = _svar(lagged=a.copy(), weight=0.5)
        res = check_svar_condition([c1, c2])
        assert not res.identifiable
        assert res.colliding_pairs == [(0, 1)]

    def test_reference_2d_instantaneous_example(self):
        # lag-free 2-variable case: opposite single edges of weight 0.5
        # B B^T differs -> identifiable
        w1 = [[0.0, 0.5], [0.0, 0.0]]
        w2 = [[0.0, 0.0], [0.5, 0.0]]
        c1 = _svar(w=w1, lag=0, lagged=np.zeros((0, 2, 2)), weight=0.5)
        c2 = _svar(w=w2, lag=0, lagged=np.zeros((0, 2, 2)), weight=0.5)
        b1 = c1.b_matrix()
        assert np.allclose(b1 @ b1.T, [[1.25, -0.5], [-0.5, 1.0]])
        b2 = c2.b_matrix()
        assert np.allclose(b2 @ b2.T, [[1.0, -0.5], [-0.5, 1.25]])
        res = check_svar_condition([c1, c2])
        assert res.identifiable

    def test_single_lagged_difference_identifiable(self):
        a1 = np.zeros((1, 3, 3))
        a2 = a1.copy()
        a2[0, 1, 2] = 0.3
        res = check_svar_condition([_svar(lagged=a1, d=3, weight=0.5),
                                    _svar(lagged=a2, d=3, weight=0.5)])
        assert res.identifiable
        assert res.min_distance == pytest.approx(0.3)

    def test_below_tolerance_counts_as_collision(self):
        a1 = np.zeros((1, 2, 2))
        a2 = a1.copy()
        a2[0, 0, 1] = 1e-8
        res = check_svar_condition([_svar(lagged=a1, weight=0.5),
                                    _svar(lagged=a2, weight=0.5)],
                                   tol=1e-6)
        assert not res.identifiable

    def test_unequal_variance_rejected(self):
        c1 = _svar(var=1.0, weight=0.5)
        c2 = _svar(var=2.0, weight=0.5)
        with pytest.raises(ident.IdentifiabilityInputError,
                           match="variance"):
            check_svar_condition([c1, c2])

    def test_nonzero_mean_with_lags_rejected(self):
        c = _svar(mean=np.array([1.0, 0.0]))
        with pytest.raises(ident.IdentifiabilityInputError, match="mean"):
            check_svar_condition([c])

    def test_lag_zero_mean_distinguishes(self):
        empty = np.zeros((0, 2, 2))
        c1 = _svar(w=None, lag=0, lagged=empty, mean=np.zeros(2), weight=0.5)
        c2 = _svar(w=None, lag=0, lagged=empty, mean=np.array([2.0, 0.0]),
                   weight=0.5)
        assert check_svar_condition([c1, c2]).identifiable

    def test_cyclic_w_rejected(self):
        w = [[0.0, 0.5], [0.5, 0.0]]
        with pytest.raises(ident.IdentifiabilityInputError, match="DAG"):
            _svar(w=w)

    def test_component_order_symmetry(self):
        rng = np.random.default_rng(0)
        comps = []
        for _ in range(3):
            a = rng.normal(size=(1, 2, 2)) * 0.3
            comps.append(_svar(lagged=a, weight=1.0 / 3.0))
        res_a = check_svar_condition(comps)
        res_b = check_svar_condition(comps[::-1])
        assert res_a.identifiable == res_b.identifiable
        assert res_a.min_distance == pytest.approx(res_b.min_distance)

    def test_variable_permutation_invariance(self):
        rng = np.random.default_rng(1)
        perm = np.array([2, 0, 1])
        comps, permuted = [], []
        for _ in range(2):
            a = rng.normal(size=(1, 3, 3)) * 0.2
            comps.append(_svar(lagged=a, d=3, weight=0.5))
            permuted.append(_svar(
                lagged=a[:, perm][:, :, perm], d=3, weight=0.5))
        assert check_svar_condition(comps).min_distance == pytest.approx(
            check_svar_condition(permuted).min_distance)


class TestConditionStar:
    def test_identity_matrix_satisfied(self):
        res = check_condition_star(np.eye(3))
        assert res.satisfied
        assert np.allclose(res.margins, 1.0)

    def test_strictness_at_exactly_half(self):
        res = check_condition_star(np.array([[0.6, 0.4], [0.5, 0.5]]))
        assert not res.satisfied
        assert res.failing_rows == [1]
        assert res.margins[1] == pytest.approx(0.0)

    def test_well_separated_gaussians(self):
        means = [-3.0, 3.0]
        witnesses = means
        beta = np.array([[np.exp(gaussian_logpdf(a, m)) for m in means]
                         for a in witnesses])
        assert check_condition_star(beta).satisfied

    def test_row_scaling_invariance(self):
        rng = np.random.default_rng(2)
        beta = rng.random((4, 4)) + np.eye(4) * 3.0
        base = check_condition_star(beta)
        scaled = beta * rng.uniform(0.5, 10.0, size=(4, 1))
        res = check_condition_star(scaled)
        assert res.satisfied == base.satisfied
        assert res.failing_rows == base.failing_rows

    def test_negative_entries_rejected(self):
        with pytest.raises(ident.IdentifiabilityInputError):
            check_condition_star(np.array([[1.0, -0.1], [0.0, 1.0]]))


class TestWitnessSearch:
    def test_separated_1d_gaussians_satisfy(self):
        rng = np.random.default_rng(3)
        x = np.concatenate([rng.normal(-4.0, 1.0, 50),
                            rng.normal(4.0, 1.0, 50)])
        ll = np.stack([gaussian_logpdf(x, -4.0), gaussian_logpdf(x, 4.0)],
                      axis=1)
        res = witness_matrix_from_loglik(ll, np.log([0.5, 0.5]))
        assert res.satisfied
        assert np.all(res.log_margins > 0)

    def test_identical_components_fail_at_exactly_half(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=60)
        one = gaussian_logpdf(x)
        ll = np.stack([one, one], axis=1)
        res = witness_matrix_from_loglik(ll, np.log([0.5, 0.5]))
        assert not res.satisfied
        assert set(res.failing_rows) == {0, 1}
        # ratio is exactly 1/2: log margin exactly 0
        assert np.allclose(res.log_margins, 0.0)

    def test_k_equals_one_vacuous(self):
        ll = np.full((10, 1), -3.0)
        res = witness_matrix_from_loglik(ll, np.log([1.0]))
        assert res.satisfied
        assert res.log_margins[0] == np.inf

    def test_component_without_majority_flagged(self):
        # component 1 dominated everywhere
        rng = np.random.default_rng(5)
        x = rng.normal(0.0, 1.0, 40)
        ll = np.stack([gaussian_logpdf(x, 0.0),
                       gaussian_logpdf(x, 0.0) - 5.0], axis=1)
        res = witness_matrix_from_loglik(ll, np.log([0.5, 0.5]))
        assert not res.satisfied
        assert 1 in res.failing_rows
        assert any("majority" in r for r in res.reasons)

    def test_beta_matrix_row_normalized(self):
        rng = np.random.default_rng(6)
        ll = rng.normal(size=(20, 3)) * 30.0  # wide range would underflow
        res = witness_matrix_from_loglik(ll, np.log(np.full(3, 1 / 3)))
        assert np.all(np.isfinite(res.matrix.beta))
        assert np.allclose(res.matrix.beta.max(axis=1), 1.0)


class TestLikelihoodMatrixValidation:
    def test_rejects_non_square(self):
        with pytest.raises(ident.IdentifiabilityInputError):
            LikelihoodMatrix(np.ones((2, 3)), np.arange(2))

    def test_rejects_nan(self):
        with pytest.raises(ident.IdentifiabilityInputError):
            LikelihoodMatrix(np.array([[np.nan, 0], [0, 1.0]]),
                             np.arange(2))
