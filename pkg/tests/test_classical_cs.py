import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import best_k_support, dense_matrix, sparse_supports_with_zero_residual
from unrolled_cs.classical_cs import (
    CGBreakdown,
    DivergenceError,
    SolverTrace,
    SparsityConfig,
    conjugate_gradient,
    fista,
    ista,
    objective,
    soft_threshold,
    total_variation,
    tune_reg_weight,
    tv_prox,
    wavelet_forward,
    wavelet_inverse,
)
from unrolled_cs.operators import MaskedFourierOperator, SamplingMask, generate_mask
from unrolled_cs.tensor_core import ShapeError


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


class TestSoftThreshold:
    def test_closed_form(self):
        assert soft_threshold(np.array(2.0), 0.5) == 1.5
        assert soft_threshold(np.array(-0.3), 0.5) == 0.0
        assert soft_threshold(np.array(-2.0), 0.5) == -1.5

    def test_zero_tau_identity(self, rng):
        x = rng.standard_normal(10)
        np.testing.assert_array_equal(soft_threshold(x, 0.0), x)

    def test_complex_keeps_phase(self):
        z = np.array([3 + 4j, 0.1j])
        out = soft_threshold(z, 1.0)
        np.testing.assert_allclose(out, [(3 + 4j) * 4 / 5, 0], atol=1e-15)

    @given(st.floats(-5, 5), st.floats(0, 3))
    @settings(max_examples=60, deadline=None)
    def test_is_prox_by_grid_search(self, z, tau):
        grid = np.arange(-8.0, 8.0, 1e-4)
        t = grid[np.argmin(0.5 * (grid - z) ** 2 + tau * np.abs(grid))]
        assert abs(float(soft_threshold(np.array(z), tau)) - t) <= 1e-4

    def test_negative_tau(self):
        with pytest.raises(ValueError):
            soft_threshold(np.zeros(2), -1)


class TestWavelet:
    def test_constant_has_no_details(self):
        c = wavelet_forward(np.full((64, 64), 2.5), levels=3)
        details = c.copy()
        details[:8, :8] = 0
        assert np.max(np.abs(details)) < 1e-13
        assert np.max(np.abs(c[:8, :8] - 2.5 * 8)) < 1e-12

    def test_round_trip(self, rng):
        x = rng.standard_normal((64, 64))
        for levels in (1, 3, 6):
            assert np.max(np.abs(wavelet_inverse(wavelet_forward(x, levels), levels) - x)) < 1e-12

    def test_norm_preserving(self, rng):
        x = rng.standard_normal((64, 64)) + 1j * rng.standard_normal((64, 64))
        assert abs(np.linalg.norm(wavelet_forward(x, 4)) - np.linalg.norm(x)) < 1e-12

    def test_orthonormal_matrix(self):
        # build the transform as a dense matrix and check W^T W = I directly
        Wm = dense_matrix(lambda e: wavelet_forward(e.reshape(8, 8), 3), 64, float)
        np.testing.assert_allclose(Wm.T @ Wm, np.eye(64), atol=1e-12)

    def test_one_dimensional(self, rng):
        x = rng.standard_normal((3, 32))
        c = wavelet_forward(x, 5, ndim=1)
        np.testing.assert_allclose(c[:, 0], x.sum(axis=1) / math.sqrt(32), atol=1e-12)
        np.testing.assert_allclose(wavelet_inverse(c, 5, ndim=1), x, atol=1e-12)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            wavelet_forward(np.zeros((12, 12)), 3)


def step_tv_closed_form(a, b, n1, n2, weight):
    """Periodic 1-d step: each plateau has two jumps, each pulling by weight / length."""
    shift1, shift2 = 2 * weight / n1, 2 * weight / n2
    assert a + shift1 < b - shift2
    return np.r_[np.full(n1, a + shift1), np.full(n2, b - shift2)]


class TestTV:
    def test_zero_weight(self, rng):
        z = rng.standard_normal((8, 8))
        np.testing.assert_array_equal(tv_prox(z, 0.0), z)

    def test_constant_unchanged(self):
        z = np.full((16, 16), 0.7)
        np.testing.assert_allclose(tv_prox(z, 3.0), z, atol=1e-14)

    def test_step_signal_closed_form(self):
        z = np.r_[np.zeros(20), np.ones(12)]
        got = tv_prox(z, 0.6, inner_iters=3000)
        np.testing.assert_allclose(got, step_tv_closed_form(0.0, 1.0, 20, 12, 0.6), atol=1e-6)

    def test_objective_decreases(self, rng):
        for _ in range(5):
            z = rng.standard_normal((16, 16))
            w = 0.3
            x = tv_prox(z, w)
            assert 0.5 * np.sum((x - z) ** 2) + w * total_variation(x) <= w * total_variation(z)

    def test_matches_generic_convex_solver(self, rng):
        cp = pytest.importorskip("cvxpy")
        z = rng.standard_normal((8, 8))
        w = 0.2
        X = cp.Variable((8, 8))
        dh = cp.hstack([X[:, 1:] - X[:, :-1], X[:, :1] - X[:, -1:]])
        dv = cp.vstack([X[1:, :] - X[:-1, :], X[:1, :] - X[-1:, :]])
        prob = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(X - z) + w * (cp.sum(cp.abs(dh)) + cp.sum(cp.abs(dv)))))
        prob.solve()
        ours = tv_prox(z, w, inner_iters=2000)
        ours_obj = 0.5 * np.sum((ours - z) ** 2) + w * total_variation(ours)
        assert ours_obj <= prob.value + 1e-5
        np.testing.assert_allclose(ours, X.value, atol=1e-3)


def small_problem(rng, n=16, fraction=0.5, k=2, levels=3):
    mask = SamplingMask(rng.random((n, n)) < fraction, fraction)
    op = MaskedFourierOperator(mask)
    c = np.zeros((n, n), complex)
    idx = rng.choice(n * n, k, replace=False)
    c.flat[idx] = rng.standard_normal(k) + 1j * rng.standard_normal(k)
    x = wavelet_inverse(c, levels)
    return op, x, op.forward(x)


class TestISTA:
    def test_full_mask_no_reg_one_step(self, rng):
        op = MaskedFourierOperator(generate_mask(16, 16, 1.0))
        x = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
        out, trace = ista(op, op.forward(x), SparsityConfig(reg_weight=0.0), iters=1)
        assert np.max(np.abs(out - x)) < 1e-12
        assert len(trace) == 1

    @pytest.mark.parametrize("transform", ["wavelet", "identity"])
    def test_monotone(self, rng, transform):
        for _ in range(5):
            op, x, y = small_problem(rng)
            y = y + 0.05 * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
            _, trace = ista(op, y, SparsityConfig(transform, reg_weight=0.05), iters=60)
            assert not trace.monotone_violations
            assert np.all(np.diff(trace.objective) <= 1e-10 * np.maximum(1, np.abs(trace.objective[:-1])))

    def test_tv_monotone_up_to_inner_accuracy(self, rng):
        op, x, y = small_problem(rng)
        _, trace = ista(op, y, SparsityConfig("tv", reg_weight=0.02, tv_iters=200), iters=30)
        assert np.all(np.diff(trace.objective) <= 1e-6)

    def test_support_matches_exhaustive_search(self, rng):
        for trial in range(10):
            rows = np.zeros(8, bool)
            rows[rng.choice(8, 4, replace=False)] = True
            op = MaskedFourierOperator(SamplingMask(rows, 0.5))
            x = np.zeros(8, complex)
            x[rng.integers(8)] = rng.uniform(1, 2) * np.exp(1j * rng.uniform(0, 2 * np.pi))
            y = op.forward(x)
            A = dense_matrix(op.forward, 8)
            oracle, _ = best_k_support(A, y, 1)
            sol, _ = ista(op, y, SparsityConfig("identity", reg_weight=0.05), iters=3000)
            support = set(np.flatnonzero(np.abs(sol) > 0.1 * np.abs(sol).max()))
            assert support == oracle

    def test_divergence_reported(self, rng):
        op, x, y = small_problem(rng)
        with pytest.raises(DivergenceError):
            ista(op, y, SparsityConfig("identity", reg_weight=1e-3), step=3.0, iters=50)

    def test_trace_csv(self, rng, tmp_path):
        op, x, y = small_problem(rng)
        _, trace = ista(op, y, SparsityConfig(reg_weight=0.01), iters=4)
        trace.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "iteration,objective,residual"
        assert len(lines) == 5


class TestFISTA:
    def test_first_iteration_equals_ista(self, rng):
        op, x, y = small_problem(rng)
        cfg = SparsityConfig(reg_weight=0.01)
        a, _ = ista(op, y, cfg, iters=1)
        b, _ = fista(op, y, cfg, iters=1)
        np.testing.assert_array_equal(a, b)

    def test_full_mask_exact(self, rng):
        op = MaskedFourierOperator(generate_mask(16, 16, 1.0))
        x = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
        out, _ = fista(op, op.forward(x), SparsityConfig(reg_weight=0.0), iters=3)
        assert np.max(np.abs(out - x)) < 1e-12

    def test_reaches_long_run_ista(self, rng):
        op, x, y = small_problem(np.random.default_rng(7))
        y = y + 0.02 * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
        cfg = SparsityConfig(reg_weight=0.02)
        _, tf = fista(op, y, cfg, iters=300)
        _, ti = ista(op, y, cfg, iters=3000)
        assert tf.objective[-1] <= ti.objective[-1] + 1e-6

    def test_not_worse_than_ista(self, rng):
        for _ in range(5):
            op, x, y = small_problem(rng)
            cfg = SparsityConfig(reg_weight=1e-3)
            _, tf = fista(op, y, cfg, iters=200)
            _, ti = ista(op, y, cfg, iters=200)
            assert tf.objective[-1] <= ti.objective[-1] + 1e-8

    def test_exact_recovery_with_continuation(self, rng):
        for _ in range(5):
            op, x, y = small_problem(rng)
            A = dense_matrix(lambda e: op.forward(wavelet_inverse(e.reshape(16, 16), 3)), 256)
            hits = sparse_supports_with_zero_residual(A, y, 2)
            if len(hits) != 1:
                continue  # not identifiable from these samples
            cfg = SparsityConfig(reg_weight=1e-9, continuation=0.95)
            out, _ = fista(op, y, cfg, iters=500)
            assert np.linalg.norm(out - x) / np.linalg.norm(x) < 1e-4

    def test_one_dimensional_recovery(self, rng):
        n = 64
        mask = SamplingMask(rng.random(n) < 0.5, 0.5)
        op = MaskedFourierOperator(mask)
        c = np.zeros(n)
        c[rng.choice(n, 2, replace=False)] = rng.uniform(1, 2, 2)
        x = wavelet_inverse(c, 4, ndim=1)
        cfg = SparsityConfig(reg_weight=1e-9, wavelet_levels=4, continuation=0.95)
        out, _ = fista(op, op.forward(x), cfg, iters=500)
        assert np.linalg.norm(out - x) / np.linalg.norm(x) < 1e-4


class TestCG:
    def test_identity_one_iteration(self, rng):
        b = rng.standard_normal(6)
        x, norms = conjugate_gradient(lambda v: v, b, iters=1)
        np.testing.assert_allclose(x, b, atol=1e-14)

    @pytest.mark.parametrize("variant", ["residual", "classic"])
    def test_two_by_two(self, variant):
        A = np.array([[4.0, 1.0], [1.0, 3.0]])
        b = np.array([1.0, 2.0])
        x, norms = conjugate_gradient(lambda v: A @ v, b, iters=2, tol=0, variant=variant)
        np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-12)

    @pytest.mark.parametrize("variant", ["residual", "classic"])
    def test_random_spd_vs_direct(self, rng, variant):
        M = rng.standard_normal((50, 50))
        A = M @ M.T + 0.5 * np.eye(50)
        b = rng.standard_normal(50)
        x, norms = conjugate_gradient(lambda v: A @ v, b, iters=500, tol=1e-13, variant=variant)
        assert np.max(np.abs(x - np.linalg.solve(A, b))) < 1e-8

    def test_residual_monotone(self, rng):
        M = rng.standard_normal((40, 40))
        A = M @ M.T + 0.1 * np.eye(40)
        _, norms = conjugate_gradient(lambda v: A @ v, rng.standard_normal(40), iters=60, tol=0)
        assert np.all(np.diff(norms) <= 1e-12 * norms[0])

    def test_ridge_normal_equations(self, rng):
        op = MaskedFourierOperator(generate_mask(16, 16, 0.4, calib_size=2, seed=1))
        x = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
        mu = 0.1
        sol, _ = conjugate_gradient(lambda v: op.normal(v) + mu * v, op.adjoint(op.forward(x)), iters=100)
        # closed form: per k-space sample, sampled entries scale by 1/(1+mu), others vanish
        k = op.kspace(x) * op.mask.included / (1 + mu)
        want = np.fft.ifft2(np.fft.ifftshift(k), norm="ortho")
        assert np.max(np.abs(sol - want)) < 1e-9

    def test_breakdown(self):
        with pytest.raises(CGBreakdown):
            conjugate_gradient(lambda v: 0 * v, np.ones(3), variant="classic")


def test_tune_reg_weight_finds_peak():
    best, score = tune_reg_weight(lambda w: -(math.log10(w) + 2.3) ** 2, lo=1e-5, hi=1.0)
    assert abs(math.log10(best) + 2.3) < 0.02
