"""softmax / sparsemax / alpha-entmax: oracles, invariants and backward rules."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaptive_vl import numerics as nx
from adaptive_vl.normalizers import (alpha_from_raw, entmax, entmax15_exact, entmax_backward_alpha,
                                     entmax_backward_z, entmax_row, entmax_rows, sparsemax_row)

score_rows = arrays(np.float64, st.integers(2, 12),
                    elements=st.floats(-3.0, 3.0, allow_nan=False, width=64))
alphas = st.floats(1.01, 2.0)


def brute_force_projection(z, step=0.001):
    """Closest point to z on a grid over the 2-simplex (3 coordinates)."""
    n = int(round(1 / step))
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    keep = i + j <= n
    p = np.stack([i[keep], j[keep], n - i[keep] - j[keep]], axis=-1) * step
    return p[np.argmin(((p - z) ** 2).sum(-1))]


class TestAlphaParametrization:
    def test_anchor(self):
        assert alpha_from_raw(0.0) == 1.5

    @given(st.floats(-30, 30))
    def test_open_interval(self, raw):
        a = alpha_from_raw(raw)
        assert 1.0 < a < 2.0 or (abs(raw) > 20 and 1.0 <= a <= 2.0)


class TestSparsemax:
    def test_symmetric(self):
        np.testing.assert_allclose(sparsemax_row([0.5, 0.5]), [0.5, 0.5])

    def test_point_mass(self):
        np.testing.assert_array_equal(sparsemax_row([1.0, 0.0]), [1.0, 0.0])

    def test_three_way_matches_grid_projection(self):
        z = np.array([0.3, 0.2, 0.1])
        grid = brute_force_projection(z)
        np.testing.assert_allclose(grid, [13 / 30, 10 / 30, 7 / 30], atol=1e-3)
        np.testing.assert_allclose(sparsemax_row(z), [13 / 30, 10 / 30, 7 / 30], atol=1e-15)

    @given(score_rows)
    def test_projection_optimality(self, z):
        """KKT: p - z + tau = 0 on the support, z - tau <= 0 off it."""
        p = sparsemax_row(z)
        tau = (z[p > 0] - p[p > 0]).mean()
        np.testing.assert_allclose(z[p > 0] - p[p > 0], tau, atol=1e-12)
        assert np.all(z[p == 0] <= tau + 1e-12)

    def test_non_finite(self):
        with pytest.raises(ArithmeticError):
            sparsemax_row([0.0, np.nan])


class TestEntmaxExamples:
    @pytest.mark.parametrize("alpha", [1.2, 1.5, 2.0])
    def test_equal_scores(self, alpha):
        np.testing.assert_allclose(entmax_row([0.7, 0.7], alpha).probabilities, [0.5, 0.5],
                                   atol=1e-12)

    def test_sparsemax_limit_point_mass(self):
        sol = entmax_row([1.0, 0.0], 2.0)
        np.testing.assert_allclose(sol.probabilities, [1.0, 0.0], atol=1e-12)
        assert sol.probabilities[1] == 0.0
        np.testing.assert_array_equal(sol.support_mask, [True, False])

    @pytest.mark.parametrize("method", ["newton", "bisect"])
    def test_entmax15_against_exact(self, method):
        z = np.array([0.6, 0.4, -2.0])
        p = entmax_row(z, 1.5, method).probabilities
        np.testing.assert_allclose(p, entmax15_exact(z), atol=1e-8)
        assert p[2] == 0.0

    def test_alpha_above_two_rejected(self):
        with pytest.raises(ValueError):
            entmax_row([0.0, 1.0], 2.5)

    def test_non_finite_rejected(self):
        with pytest.raises(ArithmeticError):
            entmax_row([0.0, np.inf], 1.5)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            entmax_row([0.0, 1.0], 1.5, method="secant")

    def test_softmax_branch(self):
        z = np.array([0.3, -1.0, 2.0])
        sol = entmax_row(z, 1.0005)
        np.testing.assert_allclose(sol.probabilities, nx.softmax_array(z), atol=1e-15)
        assert np.isnan(sol.tau).all()

    def test_solution_formula_on_support(self):
        z = np.random.default_rng(0).normal(size=9)
        for alpha in (1.25, 1.5, 1.8):
            sol = entmax_row(z, alpha)
            p, s = sol.probabilities, sol.support_mask
            formula = ((alpha - 1) * z[s] - sol.tau[0]) ** (1 / (alpha - 1))
            np.testing.assert_allclose(p[s], formula, rtol=1e-7)
            assert np.all(p[~s] == 0)

    def test_methods_agree(self):
        z = np.random.default_rng(1).normal(size=(50, 10))
        a = np.random.default_rng(2).uniform(1.05, 2.0, size=(50, 1))
        np.testing.assert_allclose(entmax_rows(z, a, "newton").probabilities,
                                   entmax_rows(z, a, "bisect").probabilities, atol=1e-9)


class TestEntmaxProperties:
    @settings(max_examples=200)
    @given(score_rows, alphas)
    def test_on_simplex(self, z, alpha):
        p = entmax_row(z, alpha).probabilities
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-8

    @given(arrays(np.float64, 6, elements=st.floats(-3, 3)))
    def test_continuity_near_softmax(self, z):
        p = entmax_row(z, 1.001).probabilities
        assert np.max(np.abs(p - nx.softmax_array(z))) <= 1e-2

    @given(score_rows)
    def test_alpha_two_is_sparsemax(self, z):
        np.testing.assert_allclose(entmax_row(z, 2.0, "bisect").probabilities, sparsemax_row(z),
                                   atol=1e-7)

    @given(score_rows, alphas, st.randoms(use_true_random=False))
    def test_permutation_equivariance(self, z, alpha, rnd):
        perm = list(range(z.size))
        rnd.shuffle(perm)
        np.testing.assert_allclose(entmax_row(z[perm], alpha).probabilities,
                                   entmax_row(z, alpha).probabilities[perm], atol=1e-10)

    @given(score_rows, alphas, st.floats(-50, 50))
    def test_shift_invariance(self, z, alpha, c):
        np.testing.assert_allclose(entmax_row(z + c, alpha).probabilities,
                                   entmax_row(z, alpha).probabilities, atol=1e-8)

    def test_support_shrinks_with_alpha(self):
        rng = np.random.default_rng(3)
        ok = 0
        for _ in range(100):
            z = rng.normal(size=8)
            ok += (entmax_row(z, 1.9).support_mask.sum() <= entmax_row(z, 1.1).support_mask.sum())
        assert ok >= 95


def _fd_jacobian_vjp(z, alpha, g, step=1e-5):
    out = np.zeros_like(z)
    for i in range(z.size):
        up, dn = z.copy(), z.copy()
        up[i] += step
        dn[i] -= step
        out[i] = ((entmax_row(up, alpha).probabilities - entmax_row(dn, alpha).probabilities)
                  @ g) / (2 * step)
    return out


class TestBackwardZ:
    def test_vertex_has_zero_gradient(self):
        sol = entmax_row([1.0, 0.0], 2.0)
        np.testing.assert_array_equal(entmax_backward_z(sol, [3.0, -1.0], 2.0), [0.0, 0.0])

    @pytest.mark.parametrize("alpha", [1.3, 1.5, 2.0])
    def test_uniform_point(self, alpha):
        z = np.zeros(5)
        g = np.random.default_rng(4).normal(size=5)
        sol = entmax_row(z, alpha)
        np.testing.assert_allclose(entmax_backward_z(sol, g, alpha), _fd_jacobian_vjp(z, alpha, g),
                                   atol=1e-5)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_six_vector(self, seed):
        rng = np.random.default_rng(seed)
        z, g = rng.normal(size=6), rng.normal(size=6)
        sol = entmax_row(z, 1.5)
        got = entmax_backward_z(sol, g, 1.5)
        np.testing.assert_allclose(got, _fd_jacobian_vjp(z, 1.5, g), atol=1e-5)
        assert np.all(got[~sol.support_mask] == 0)

    def test_softmax_branch_uses_softmax_jacobian(self):
        z = np.array([0.2, -0.4, 1.0])
        g = np.array([1.0, 2.0, -1.0])
        p = nx.softmax_array(z)
        expected = p * (g - p @ g)
        np.testing.assert_allclose(entmax_backward_z(entmax_row(z, 1.0), g, 1.0), expected,
                                   atol=1e-15)


class TestBackwardAlpha:
    def test_uniform_scores_zero(self):
        z = np.full(3, 0.4)
        grad, clamped = entmax_backward_alpha(entmax_row(z, 1.5), z, [1.0, -2.0, 0.5], 1.5)
        assert abs(float(grad)) < 1e-12 and not bool(clamped)

    @pytest.mark.parametrize("z,g", [
        (np.array([1.0, 0.0]), np.array([1.0, -1.0])),
        (np.random.default_rng(5).normal(size=8), np.random.default_rng(6).normal(size=8)),
    ])
    def test_matches_fine_step(self, z, g):
        alpha, h = 1.5, 1e-6
        grad, _ = entmax_backward_alpha(entmax_row(z, alpha), z, g, alpha)
        fine = ((entmax_row(z, alpha + h).probabilities - entmax_row(z, alpha - h).probabilities)
                @ g) / (2 * h)
        np.testing.assert_allclose(float(grad), fine, rtol=1e-4)

    def test_clamped_at_upper_edge(self):
        z = np.array([0.3, 0.1, -0.2])
        _, clamped = entmax_backward_alpha(entmax_row(z, 2.0), z, np.ones(3), 2.0)
        assert bool(clamped)


class TestAutogradWrapper:
    def test_raw_alpha_gradient_per_head(self):
        rng = np.random.default_rng(7)
        scores = nx.parameter(rng.normal(size=(2, 3, 4, 5)))
        raw = nx.parameter(np.array([0.3, -0.8, 1.1]))
        w = rng.normal(size=scores.shape)

        def loss():
            with nx.no_grad():
                return float((entmax(scores, raw_alpha=raw).data * w).sum())

        (entmax(scores, raw_alpha=raw) * nx.Tensor(w)).sum().backward()
        np.testing.assert_allclose(raw.grad, nx.finite_difference(loss, raw.data, step=1e-5),
                                   rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(scores.grad, nx.finite_difference(loss, scores.data),
                                   atol=1e-5)
