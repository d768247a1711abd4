import math

import numpy as np
import pytest
import scipy.linalg
from conftest import random_tangent_patches, small_operator

from afflow import data
from afflow import manifold as mf
from afflow.flow import FlowOperator, distance_field, solve_linearized
from afflow.gradient import (AugmentedOperator, BudgetError, apply_dA_transpose_rank1, assemble_b1, benzi_rank1,
                             dA_adjoint, dA_dense, dense_dv_T, dense_first_summand, dense_v_T, df1, df1_adjoint, df2,
                             df2_adjoint, df3_adjoint, df3_apply, fd_gradient_oracle, full_gradient, loss_distance,
                             loss_distance_grad, loss_value, pixel_cosines, regularizer, regularizer_differential,
                             regularizer_grad, riemannian_gradient, second_summand_grad)
from afflow.graph import WeightField, build_grid, uniform_weights
from afflow.krylov import kron_sum, phi_dense

T = 2.0


def perturbed(op, Y, eps):
    return FlowOperator(op.graph, WeightField(op.graph, op.omega.patches + eps * Y), op.distances)


def directional_fd(f, op, Y, eps=1e-6):
    return (f(perturbed(op, Y, eps)) - f(perturbed(op, Y, -eps))) / (2 * eps)


def setup_full(rng, h=2, w=2, J=2, T=T):
    op, image, labels = small_operator(rng, h, w, J)
    Vstar = mf.project_tangent(rng.standard_normal((op.n_pixels, J)))
    return op, image, labels, Vstar


class TestLoss:
    def test_aligned(self, rng):
        V = rng.standard_normal((6, 3))
        assert loss_distance(2.5 * V, V) == pytest.approx(0.0, abs=1e-15)

    def test_opposite(self, rng):
        V = rng.standard_normal((6, 3))
        assert loss_distance(-V, V) == pytest.approx(2.0)

    def test_orthogonal(self):
        assert loss_distance(np.array([[1.0, -1.0, 0]]), np.array([[1.0, 1.0, -2.0]])) == pytest.approx(1.0)

    def test_zero_field(self):
        assert loss_distance(np.zeros((2, 2)), np.ones((2, 2))) == 1.0

    def test_grad_at_target(self, rng):
        V = mf.project_tangent(rng.standard_normal((5, 3)))
        np.testing.assert_allclose(loss_distance_grad(V, V), 0, atol=1e-15)

    def test_grad_homogeneity(self, rng):
        V, Vs = mf.project_tangent(rng.standard_normal((2, 5, 3)))
        np.testing.assert_allclose(loss_distance_grad(3 * V, Vs), loss_distance_grad(V, Vs) / 3, atol=1e-15)

    def test_grad_fd(self, rng):
        V, Vs = mf.project_tangent(rng.standard_normal((2, 5, 3)))
        G = loss_distance_grad(V, Vs)
        h = 1e-6
        for _ in range(5):
            Y = mf.project_tangent(rng.standard_normal((5, 3)))
            fd = (loss_distance(V + h * Y, Vs) - loss_distance(V - h * Y, Vs)) / (2 * h)
            assert np.sum(G * Y) == pytest.approx(fd, abs=1e-6)

    def test_grad_zero_raises(self):
        with pytest.raises(ZeroDivisionError):
            loss_distance_grad(np.zeros((2, 2)), np.ones((2, 2)))


class TestRegularizer:
    def test_uniform(self):
        om = uniform_weights(build_grid(3, 3))
        assert regularizer(om, 0.3) == 0.0
        np.testing.assert_allclose(regularizer_grad(om, 0.3), 0, atol=1e-15)

    def test_linear_in_tau(self, rng):
        P = mf.exp_map(mf.barycenter((4, 9)), rng.standard_normal((4, 9)))
        assert regularizer(P, 0.2) == pytest.approx(2 * regularizer(P, 0.1))

    def test_toy_patch(self):
        # t = [ln 2, -ln 2], |t|^2 = 2 ln(2)^2
        assert regularizer(np.array([[0.8, 0.2]]), 1.0) == pytest.approx(math.log(2) ** 2, rel=1e-12)
        assert regularizer(np.array([[0.8, 0.2]]), 1.0) == pytest.approx(0.4805, abs=5e-5)

    def test_pairing(self, rng):
        P = mf.exp_map(mf.barycenter((6, 9)), rng.standard_normal((6, 9)))
        Y = mf.project_tangent(rng.standard_normal((6, 9)))
        assert np.sum(regularizer_grad(P, 0.7) * Y) == pytest.approx(regularizer_differential(P, 0.7, Y), abs=1e-10)

    def test_fd(self, rng):
        P = mf.exp_map(mf.barycenter((6, 9)), rng.standard_normal((6, 9)))
        Y = mf.project_tangent(rng.standard_normal((6, 9)))
        h = 1e-6
        fd = (regularizer(P + h * Y, 0.7) - regularizer(P - h * Y, 0.7)) / (2 * h)
        assert np.sum(regularizer_grad(P, 0.7) * Y) == pytest.approx(fd, abs=1e-6)


class TestAdjoints:
    @pytest.fixture
    def inst(self, rng):
        op, _, _ = small_operator(rng, 2, 2, 2)
        return op, random_tangent_patches(rng, op)

    def test_df1(self, rng, inst):
        op, Y = inst
        Z = rng.standard_normal((op.n_pixels, op.n_labels))
        assert np.sum(df1(op, Y) * Z) == pytest.approx(np.sum(df1_adjoint(op, Z) * Y), abs=1e-9)

    def test_df1_is_derivative(self, inst):
        op, Y = inst
        np.testing.assert_allclose(df1(op, Y), directional_fd(lambda o: o.S, op, Y), atol=1e-8)

    def test_df2(self, rng, inst):
        op, Y = inst
        z = rng.standard_normal(op.dim)
        assert df2(op, Y) @ z == pytest.approx(np.sum(df2_adjoint(op, z) * Y), abs=1e-9)

    def test_df2_is_derivative(self, inst):
        op, Y = inst
        np.testing.assert_allclose(df2(op, Y), directional_fd(lambda o: o.b, op, Y), atol=1e-8)

    def test_df3(self, rng, inst):
        op, Y = inst
        a, z = rng.standard_normal((2, op.dim))
        assert a @ df3_apply(op, Y, z) == pytest.approx(np.sum(df3_adjoint(op, a, z) * Y), abs=1e-9)

    def test_df3_is_derivative(self, rng, inst):
        op, Y = inst
        v = rng.standard_normal(op.dim)
        np.testing.assert_allclose(df3_apply(op, Y, v), directional_fd(lambda o: o.apply(v), op, Y), atol=1e-8)

    @pytest.mark.parametrize("include_b", [True, False])
    def test_dA(self, rng, inst, include_b):
        op, Y = inst
        k = op.dim + 1
        terms = [(rng.standard_normal(), rng.standard_normal(k), rng.standard_normal(k)) for _ in range(2)]
        Z = sum(a * np.outer(u, w) for a, u, w in terms)
        lhs = np.sum(dA_dense(op, Y, T, include_b) * Z)
        assert lhs == pytest.approx(np.sum(dA_adjoint(op, terms, T, include_b) * Y), abs=1e-9)

    def test_dA_is_derivative(self, inst):
        op, Y = inst
        fd = directional_fd(lambda o: AugmentedOperator(o, T).to_dense(), op, Y)
        np.testing.assert_allclose(dA_dense(op, Y, T), fd, atol=1e-8)


class TestAugmented:
    def test_last_row_zero(self, rng):
        op, _, _ = small_operator(rng, 2, 3, 2)
        aug = AugmentedOperator(op, T)
        assert aug.apply(rng.standard_normal(aug.dim))[-1] == 0.0

    def test_adjoint(self, rng):
        op, _, _ = small_operator(rng, 2, 3, 2)
        aug = AugmentedOperator(op, T)
        x, y = rng.standard_normal((2, aug.dim))
        assert y @ aug.apply(x) == pytest.approx(aug.apply_transpose(y) @ x, abs=1e-12)
        np.testing.assert_allclose(aug.to_dense() @ x, aug.apply(x), atol=1e-14)


class TestB1:
    def test_zero_operator(self, rng):
        op, _, _ = small_operator(rng, 2, 2, 2)
        op.apply = op.apply_transpose = lambda v: np.zeros(len(v))
        g = rng.standard_normal(op.dim)
        vT = T * op.b
        b1 = assemble_b1(op, vT, g, T)
        np.testing.assert_allclose(b1[:-1], g, atol=1e-15)
        assert b1[-1] == pytest.approx(T * op.b @ g)

    def test_dense(self, rng):
        op, _, _ = small_operator(rng, 2, 2, 2)
        g = rng.standard_normal(op.dim)
        vT = dense_v_T(op, T)
        b1 = assemble_b1(op, vT, g, T, op.dim)
        np.testing.assert_allclose(b1[:-1], scipy.linalg.expm(T * op.to_dense()).T @ g, atol=1e-9)

    def test_linear(self, rng):
        op, _, _ = small_operator(rng, 2, 2, 2)
        g1, g2 = rng.standard_normal((2, op.dim))
        vT = dense_v_T(op, T)
        np.testing.assert_allclose(assemble_b1(op, vT, 2 * g1 - g2, T),
                                   2 * assemble_b1(op, vT, g1, T) - assemble_b1(op, vT, g2, T), atol=1e-12)

    def test_zero_g(self, rng):
        op, _, _ = small_operator(rng)
        with pytest.raises(ValueError):
            assemble_b1(op, op.b, np.zeros(op.dim), T)


class TestBenzi:
    @pytest.fixture
    def inst(self, rng):
        op, _, _, Vstar = setup_full(rng)
        aug = AugmentedOperator(op, T)
        g = loss_distance_grad(dense_v_T(op, T).reshape(op.n_pixels, -1), Vstar).reshape(-1)
        b1 = assemble_b1(op, dense_v_T(op, T), g, T, op.dim)
        return op, aug, b1

    def dense_core(self, aug, b1):
        M = aug.to_dense()
        e = np.zeros(aug.dim)
        e[-1] = 1.0
        _, x = phi_dense(kron_sum(-M.T, M), np.kron(b1, e))
        return x.reshape(aug.dim, aug.dim)

    def test_full_dimension(self, inst):
        op, aug, b1 = inst
        assert aug.dim == 9
        fac = benzi_rank1(aug, b1, aug.dim)
        X = self.dense_core(aug, b1)
        np.testing.assert_allclose(fac.reconstruct(None), X, atol=1e-10 * np.abs(X).max())

    def test_m_one(self, inst):
        _, aug, b1 = inst
        fac = benzi_rank1(aug, b1, 1)
        e = np.zeros(aug.dim)
        e[-1] = 1.0
        nb = np.linalg.norm(b1)
        h = -(b1 @ aug.to_dense().T @ b1) / nb ** 2  # e^T Acal e = 0
        np.testing.assert_allclose(fac.reconstruct(), nb * (math.expm1(h) / h) * np.outer(b1 / nb, e), atol=1e-12)

    def test_rank1_truncation_bound(self, inst):
        _, aug, b1 = inst
        fac = benzi_rank1(aug, b1, aug.dim)
        full = fac.reconstruct(None)
        err = np.linalg.norm(full - fac.reconstruct(1), 2) / np.linalg.norm(full, 2)
        assert err <= fac.sigma_ratio + 1e-10

    def test_sorted_and_normalized(self, inst):
        _, aug, b1 = inst
        fac = benzi_rank1(aug, b1, 6)
        assert np.all(np.diff(fac.sigmas) <= 0) and fac.sigmas[-1] >= 0
        assert np.linalg.norm(fac.u) <= 1 + 1e-10 and np.linalg.norm(fac.w) <= 1 + 1e-10
        assert fac.c == pytest.approx(np.linalg.norm(b1))

    def test_dA_transpose_duality(self, rng, inst):
        op, aug, b1 = inst
        fac = benzi_rank1(aug, b1, 10)
        Y = random_tangent_patches(rng, op)
        G = apply_dA_transpose_rank1(op, fac)
        Z = fac.c * fac.sigma1 * np.outer(fac.u, fac.w)
        assert np.sum(G * Y) == pytest.approx(np.sum(dA_dense(op, Y, T) * Z), abs=1e-9)
        assert G.shape == op.graph.neighbor_index.shape

    def test_zero_factors(self, inst):
        op, aug, b1 = inst
        fac = benzi_rank1(aug, b1, 10)
        fac.c = 0.0
        assert not np.any(apply_dA_transpose_rank1(op, fac))


class TestSecondSummand:
    def test_pairing(self, rng):
        op, _, _ = small_operator(rng, 2, 2, 2)
        g = rng.standard_normal(op.dim)
        Y = random_tangent_patches(rng, op)
        _, ref = phi_dense(T * op.to_dense(), T * df2(op, Y))
        assert np.sum(second_summand_grad(op, g, T, op.dim) * Y) == pytest.approx(g @ ref, abs=1e-8)

    def test_zero_and_linear(self, rng):
        op, _, _ = small_operator(rng, 2, 2, 2)
        assert not np.any(second_summand_grad(op, np.zeros(op.dim), T))
        g1, g2 = rng.standard_normal((2, op.dim))
        np.testing.assert_allclose(second_summand_grad(op, g1 + 3 * g2, T),
                                   second_summand_grad(op, g1, T) + 3 * second_summand_grad(op, g2, T), atol=1e-12)


class TestDirectionalDerivative:
    def test_dv_T_matches_fd(self, rng):
        op, _, _ = small_operator(rng, 2, 2, 2)
        Y = random_tangent_patches(rng, op)
        fd = directional_fd(lambda o: dense_v_T(o, T), op, Y)
        np.testing.assert_allclose(dense_dv_T(op, Y, T), fd, atol=1e-6)

    def test_first_summand_with_b_already_complete(self, rng):
        # the last column of dAcal already carries db, so adding the data-vector
        # term on top of it would count that part twice
        op, _, _ = small_operator(rng, 2, 2, 2)
        Y = random_tangent_patches(rng, op)
        full = dense_dv_T(op, Y, T)
        np.testing.assert_allclose(dense_first_summand(op, Y, T, include_b=True), full, atol=1e-12)
        _, extra = phi_dense(T * op.to_dense(), T * df2(op, Y))
        assert np.linalg.norm(dense_first_summand(op, Y, T, True) + extra - full) > 1e-3 * np.linalg.norm(full)


class TestFullGradient:
    @pytest.mark.parametrize("second_summand", [True, False])
    def test_full_rank_is_exact(self, rng, second_summand):
        op, _, _, Vstar = setup_full(rng)
        k = op.dim + 1
        res = full_gradient(op, Vstar, T, k, 0.1, rank=None, second_summand=second_summand)
        for _ in range(3):
            Y = random_tangent_patches(rng, op)
            fd = directional_fd(lambda o: loss_value(o, Vstar, T, k, 0.1)[0], op, Y)
            assert np.sum(res.euclidean * Y) == pytest.approx(fd, abs=1e-7)

    def test_perfect_fit(self, rng):
        op, _, _ = small_operator(rng, 3, 3, 2)
        Vstar = solve_linearized(op, T, 10)
        res = full_gradient(op, 2.0 * Vstar, T, 10, 0.0)
        assert np.abs(res.euclidean).max() < 1e-10

    def test_regularizer_only(self, rng):
        op, _, _ = small_operator(rng, 3, 3, 2)
        Vstar = solve_linearized(op, T, 10)
        res = full_gradient(op, Vstar, T, 10, 0.3)
        np.testing.assert_allclose(res.euclidean, regularizer_grad(op.omega, 0.3), atol=1e-10)

    def test_degenerate_flow(self, rng):
        g = build_grid(3, 3)
        from afflow.flow import DistanceField
        op = FlowOperator(g, uniform_weights(g), DistanceField(np.full((9, 2), 0.5)))
        with pytest.warns(UserWarning):
            res = full_gradient(op, mf.project_tangent(rng.standard_normal((9, 2))), T)
        assert res.degenerate and not np.any(res.euclidean)

    def test_riemannian_rows_sum_zero(self, rng):
        op, _, _, Vstar = setup_full(rng, 3, 3, 3)
        res = full_gradient(op, Vstar, T)
        np.testing.assert_allclose(res.riemannian.sum(axis=1), 0, atol=1e-12)

    def test_descent(self, rng):
        op, _, _, Vstar = setup_full(rng, 3, 3, 3)
        res = full_gradient(op, Vstar, T, 10, 0.1)
        before = loss_value(op, Vstar, T, 10, 0.1)[0]
        P = mf.exp_map(op.omega.patches, -1e-4 * res.riemannian)
        after = loss_value(FlowOperator(op.graph, WeightField(op.graph, P), op.distances), Vstar, T, 10, 0.1)[0]
        assert after < before


class TestRiemannian:
    def test_constant(self, rng):
        P = mf.exp_map(mf.barycenter((4, 9)), rng.standard_normal((4, 9)))
        np.testing.assert_allclose(riemannian_gradient(np.full((4, 9), 2.0), P), 0, atol=1e-15)

    def test_zero(self, rng):
        P = mf.exp_map(mf.barycenter((4, 9)), rng.standard_normal((4, 9)))
        assert not np.any(riemannian_gradient(np.zeros((4, 9)), P))


class TestOracle:
    def test_richardson(self, rng):
        # uniform weights keep the large probing steps inside the simplex
        op, image, labels = small_operator(rng, 2, 2, 2, random_omega=False)
        Vstar = mf.project_tangent(rng.standard_normal((4, 2)))
        exact = mf.project_tangent(full_gradient(op, Vstar, T, op.dim + 1, 0.1, rank=None).euclidean)
        errs = [np.abs(fd_gradient_oracle(image, labels, op.omega, Vstar, T, 0.1, h_fd=h, solver="dense") - exact).max()
                for h in (2e-2, 1e-2)]
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)

    def test_euler_vs_dense(self, rng):
        op, image, labels, Vstar = setup_full(rng, 4, 4, 2)
        fe = fd_gradient_oracle(image, labels, op.omega, Vstar, T, 0.1, euler_h=1e-3)
        fdn = fd_gradient_oracle(image, labels, op.omega, Vstar, T, 0.1, solver="dense")
        assert np.min(pixel_cosines(fe, fdn)) > 0.99

    def test_homogeneous_regions(self):
        truth = np.zeros((8, 16), dtype=int)
        truth[:, 8:] = 1
        labels = np.array([[0.0, 0, 0], [1, 1, 1]])
        g = build_grid(8, 16)
        Vs = mf.project_tangent(data.smooth_one_hot(truth, 2).reshape(-1, 2))
        fd = fd_gradient_oracle(labels[truth], labels, uniform_weights(g), Vs, 5.0, 0.1, solver="dense")
        norms = np.linalg.norm(fd, axis=1).reshape(8, 16)
        assert norms[:, [3, 4, 11, 12]].max() < 1e-2 * norms.max()

    def test_budget(self, rng):
        op, image, labels, Vstar = setup_full(rng, 4, 4, 2)
        with pytest.raises(BudgetError):
            fd_gradient_oracle(image, labels, op.omega, Vstar, T, max_evals=100)

    def test_unknown_solver(self, rng):
        op, image, labels, Vstar = setup_full(rng)
        with pytest.raises(ValueError):
            fd_gradient_oracle(image, labels, op.omega, Vstar, T, solver="rk4")
