"""State space core: discretization fixtures, oracle equivalence, gradients."""

import numpy as np
import pytest
import scipy.linalg

from mambaloc import tensor as T
from mambaloc.ssm import (
    SSMParams,
    discretize_zoh,
    lti_apply_dense,
    matrix_exp,
    naive_selective_recurrence,
    selective_scan,
)
from mambaloc.tensor import NumericError, ShapeError, Tensor, grad_check


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-30)
    return float(np.max(np.abs(a - b) / denom))


def random_instance(seed, L=None, D=None, N=None, dtype=np.float64):
    rng = np.random.default_rng(seed)
    L = L or int(rng.integers(1, 65))
    D = D or int(rng.integers(1, 9))
    N = N or int(rng.integers(1, 9))
    u = rng.standard_normal((L, D)).astype(dtype)
    delta = rng.uniform(0.001, 0.5, (L, D)).astype(dtype)
    A = (-rng.uniform(0.1, 2.0, (D, N))).astype(dtype)
    B = rng.standard_normal((L, N)).astype(dtype)
    C = rng.standard_normal((L, N)).astype(dtype)
    Ds = rng.standard_normal(D).astype(dtype)
    return u, delta, A, B, C, Ds


class TestMatrixExp:
    def test_zero_matrix(self):
        np.testing.assert_array_equal(matrix_exp(np.zeros((3, 3))), np.eye(3))

    def test_diagonal_matches_scalar_exp(self, rng):
        d = rng.standard_normal(4)
        out = matrix_exp(np.diag(d))
        np.testing.assert_allclose(out, np.diag(np.exp(d)), rtol=1e-13)

    def test_nilpotent_truncates_exactly(self):
        A = np.array([[0.0, 1.0], [0.0, 0.0]])
        np.testing.assert_allclose(matrix_exp(A), np.eye(2) + A, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_pade_oracle(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((5, 5)) * (10.0 ** rng.integers(-2, 2))
        assert rel_err(matrix_exp(A), scipy.linalg.expm(A)) < 1e-11


class TestDiscretizeZoh:
    def test_zero_A_gives_delta_B(self):
        A_bar, B_bar = discretize_zoh([[0.0]], [[1.0]], 0.5)
        np.testing.assert_allclose(A_bar, [[1.0]], atol=1e-12)
        np.testing.assert_allclose(B_bar, [[0.5]], atol=1e-12)

    def test_scalar_half_life(self):
        A_bar, B_bar = discretize_zoh([[-1.0]], [[1.0]], np.log(2.0))
        np.testing.assert_allclose(A_bar, [[0.5]], atol=1e-12)
        np.testing.assert_allclose(B_bar, [[0.5]], atol=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_dense_3x3_matches_expm_oracle(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((3, 3))
        B = rng.standard_normal((3, 1))
        delta = 0.3
        A_bar, B_bar = discretize_zoh(A, B, delta)
        Z = delta * A
        A_ref = scipy.linalg.expm(Z)
        B_ref = np.linalg.solve(Z, (A_ref - np.eye(3)) @ (delta * B))
        assert rel_err(A_bar, A_ref) < 1e-10
        assert rel_err(B_bar, B_ref) < 1e-10

    def test_tiny_norm_uses_series_consistently(self, rng):
        A = rng.standard_normal((3, 3))
        delta = 1e-6  # ||delta A|| below the series threshold
        A_bar, B_bar = discretize_zoh(A, np.eye(3), delta)
        np.testing.assert_allclose(A_bar, scipy.linalg.expm(delta * A), rtol=1e-12)
        # integral form: B_bar = delta B + O(delta^2), so compare with slack
        np.testing.assert_allclose(B_bar, delta * np.eye(3), rtol=1e-5, atol=1e-11)

    def test_diagonal_closed_form_matches_dense_path(self, rng):
        d = -rng.uniform(0.1, 2.0, 4)
        B = rng.standard_normal((4, 2))
        A_bar, B_bar = discretize_zoh(np.diag(d), B, 0.7)
        Z = 0.7 * np.diag(d)
        A_ref = scipy.linalg.expm(Z)
        B_ref = np.linalg.solve(Z, (A_ref - np.eye(4)) @ (0.7 * B))
        assert rel_err(A_bar, A_ref) < 1e-12
        assert rel_err(B_bar, B_ref) < 1e-12

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(ValueError):
            discretize_zoh([[-1.0]], [[1.0]], 0.0)
        with pytest.raises(ValueError):
            discretize_zoh([[-1.0]], [[1.0]], -0.1)

    def test_singular_dense_reports_condition(self):
        A = np.array([[0.0, 1.0], [0.0, 0.0]])
        with pytest.raises(NumericError, match="condition"):
            discretize_zoh(A, np.ones((2, 1)), 1.0)


class TestLtiApplyDense:
    def test_half_decay_sequence(self):
        params = SSMParams("reference", A=[[-1.0]], B=[[1.0]], C=[[1.0]], D=0.0)
        y = lti_apply_dense(params, [1.0, 1.0, 1.0], np.log(2.0))
        np.testing.assert_allclose(y, [0.5, 0.75, 0.875], atol=1e-12)

    def test_single_step_from_zero_state(self, rng):
        A = rng.standard_normal((3, 3)) * 0.3
        B = rng.standard_normal((3, 1))
        C = rng.standard_normal((1, 3))
        params = SSMParams("reference", A=A, B=B, C=C, D=0.7)
        x1 = 1.3
        y = lti_apply_dense(params, [x1], 0.2)
        _, B_bar = discretize_zoh(A, B, 0.2)
        np.testing.assert_allclose(y, [(C @ B_bar)[0, 0] * x1 + 0.7 * x1], rtol=1e-12)

    def test_zero_input_stays_zero(self, rng):
        A = rng.standard_normal((2, 2)) * 0.3
        params = SSMParams("reference", A=A, B=[[1.0], [0.5]], C=[[1.0, -1.0]], D=0.3)
        np.testing.assert_array_equal(lti_apply_dense(params, np.zeros(5), 0.1), np.zeros(5))

    def test_params_validate_shapes(self):
        with pytest.raises(ShapeError):
            SSMParams("reference", A=[[1.0, 0.0]], B=[[1.0]], C=[[1.0]])
        with pytest.raises(ShapeError):
            SSMParams("reference", A=[[1.0]], B=[1.0], C=[[1.0]])
        with pytest.raises(ValueError):
            SSMParams("dense")

    def test_selective_params_expose_negative_diagonal(self):
        p = SSMParams("selective", A_log=np.log([[1.0, 2.0]]), D_skip=[0.5])
        np.testing.assert_allclose(p.A_diag, [[-1.0, -2.0]])
        assert np.all(p.A_diag < 0)


class TestNaiveRecurrence:
    def test_matches_lti_on_constant_parameters(self, rng):
        N, L = 3, 12
        a = -rng.uniform(0.2, 1.5, N)
        b = rng.standard_normal(N)
        c = rng.standard_normal(N)
        x = rng.standard_normal(L)
        delta = 0.17
        params = SSMParams("reference", A=np.diag(a), B=b[:, None], C=c[None, :], D=0.4)
        y_ref = lti_apply_dense(params, x, delta)
        y = naive_selective_recurrence(
            x[:, None], np.full((L, 1), delta), a[None, :],
            np.tile(b, (L, 1)), np.tile(c, (L, 1)), np.array([0.4]),
        )
        assert rel_err(y[:, 0], y_ref) < 1e-10

    def test_channel_permutation_permutes_outputs(self):
        u, delta, A, B, C, Ds = random_instance(7, L=10, D=4, N=3)
        y = naive_selective_recurrence(u, delta, A, B, C, Ds)
        perm = np.array([2, 0, 3, 1])
        y_perm = naive_selective_recurrence(u[:, perm], delta[:, perm], A[perm], B, C, Ds[perm])
        np.testing.assert_array_equal(y_perm, y[:, perm])

    def test_zero_input_zero_feedthrough(self):
        u, delta, A, B, C, _ = random_instance(3, L=8, D=2, N=4)
        y = naive_selective_recurrence(np.zeros_like(u), delta, A, B, C, np.zeros(2))
        np.testing.assert_array_equal(y, np.zeros_like(u))

    def test_rejects_nonpositive_delta(self):
        u, delta, A, B, C, Ds = random_instance(0, L=4, D=2, N=2)
        delta[1, 0] = 0.0
        with pytest.raises(ValueError):
            naive_selective_recurrence(u, delta, A, B, C, Ds)

    def test_rejects_nonnegative_A(self):
        u, delta, A, B, C, Ds = random_instance(0, L=4, D=2, N=2)
        A[0, 0] = 0.0
        with pytest.raises(ValueError):
            naive_selective_recurrence(u, delta, A, B, C, Ds)

    def test_stability_bound_on_constant_instance(self, rng):
        L, D, N = 40, 3, 4
        u = rng.uniform(-1.0, 1.0, (L, D))
        delta = np.full((L, D), 0.3)
        A = -rng.uniform(0.2, 1.5, (D, N))
        B = np.tile(rng.standard_normal(N), (L, 1))
        C = np.tile(rng.standard_normal(N), (L, 1))
        _, states = naive_selective_recurrence(u, delta, A, B, C, np.zeros(D), return_states=True)
        a_bar = np.exp(delta[0][:, None] * A)
        assert np.max(np.abs(a_bar)) < 1.0
        inject = np.abs(np.expm1(delta[0][:, None] * A) / A * B[0]) * np.abs(u).max()
        bound = inject.max() / (1.0 - np.abs(a_bar).max())
        assert np.max(np.abs(states)) <= bound + 1e-12


class TestSelectiveScan:
    @pytest.mark.parametrize("mode", ["zoh", "simplified"])
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_oracle_double(self, seed, mode):
        u, delta, A, B, C, Ds = random_instance(seed)
        y_ref = naive_selective_recurrence(u, delta, A, B, C, Ds, mode=mode)
        y = selective_scan(t64(u), t64(delta), t64(A), t64(B), t64(C), t64(Ds), mode=mode)
        assert rel_err(y.data, y_ref) < 1e-10

    def test_single_step_closed_form(self, rng):
        D, N = 3, 4
        u = rng.standard_normal((1, D))
        delta = rng.uniform(0.05, 0.3, (1, D))
        A = -rng.uniform(0.2, 1.5, (D, N))
        B = rng.standard_normal((1, N))
        C = rng.standard_normal((1, N))
        Ds = rng.standard_normal(D)
        y = selective_scan(t64(u), t64(delta), t64(A), t64(B), t64(C), t64(Ds))
        b_bar = np.expm1(delta[0][:, None] * A) / A * B[0]
        y_ref = (b_bar * u[0][:, None]) @ C[0] + Ds * u[0]
        np.testing.assert_allclose(y.data[0], y_ref, rtol=1e-12)

    def test_zero_input_zero_feedthrough(self):
        u, delta, A, B, C, _ = random_instance(11, L=6, D=3, N=2)
        y = selective_scan(t64(np.zeros_like(u)), t64(delta), t64(A), t64(B), t64(C), t64(np.zeros(3)))
        np.testing.assert_array_equal(y.data, np.zeros_like(u))

    def test_linear_in_input_at_fixed_parameters(self):
        _, delta, A, B, C, _ = random_instance(5, L=24, D=4, N=4)
        rng = np.random.default_rng(99)
        u1 = rng.standard_normal((24, 4))
        u2 = rng.standard_normal((24, 4))
        Ds = t64(np.zeros(4))
        args = (t64(delta), t64(A), t64(B), t64(C), Ds)
        y1 = selective_scan(t64(u1), *args).data
        y2 = selective_scan(t64(u2), *args).data
        y12 = selective_scan(t64(1.3 * u1 - 0.7 * u2), *args).data
        assert rel_err(y12, 1.3 * y1 - 0.7 * y2) < 1e-10

    def test_batched_matches_per_instance(self):
        insts = [random_instance(100 + s, L=12, D=3, N=4) for s in range(3)]
        u = np.stack([i[0] for i in insts])
        delta = np.stack([i[1] for i in insts])
        A, _, _, Ds = insts[0][2], None, None, insts[0][5]
        B = np.stack([i[3] for i in insts])
        C = np.stack([i[4] for i in insts])
        y = selective_scan(t64(u), t64(delta), t64(A), t64(B), t64(C), t64(Ds))
        for g in range(3):
            y_one = selective_scan(
                t64(u[g]), t64(delta[g]), t64(A), t64(B[g]), t64(C[g]), t64(Ds)
            )
            np.testing.assert_allclose(y.data[g], y_one.data, rtol=1e-14, atol=0)

    def test_rejects_bad_shapes_and_values(self):
        u, delta, A, B, C, Ds = random_instance(0, L=4, D=2, N=2)
        with pytest.raises(ShapeError):
            selective_scan(t64(u), t64(delta), t64(A), t64(B[:3]), t64(C), t64(Ds))
        with pytest.raises(ValueError):
            selective_scan(t64(u), t64(-delta), t64(A), t64(B), t64(C), t64(Ds))
        with pytest.raises(ValueError):
            selective_scan(t64(u), t64(delta), t64(-A), t64(B), t64(C), t64(Ds))

    @pytest.mark.parametrize("mode", ["zoh", "simplified"])
    def test_gradients_all_arguments(self, mode):
        rng = np.random.default_rng(42)
        L, D, N = 6, 3, 2
        u = rng.standard_normal((L, D))
        delta_raw = rng.uniform(-2.0, 0.0, (L, D))
        A_log = rng.uniform(-0.5, 0.5, (D, N))
        B = rng.standard_normal((L, N))
        C = rng.standard_normal((L, N))
        Ds = rng.standard_normal(D)
        w = np.linspace(0.5, 1.5, L * D).reshape(L, D)

        def run(ut, dt_raw, alog, bt, ct, dst):
            delta = T.softplus(dt_raw)
            A = T.mul(T.exp(alog), -1.0)
            y = selective_scan(ut, delta, A, bt, ct, dst, mode=mode)
            return T.sum_(T.mul(y, t64(w)))

        parts = [t64(u), t64(delta_raw), t64(A_log), t64(B), t64(C), t64(Ds)]
        names = ["u", "delta", "A_log", "B_seq", "C_seq", "D_skip"]
        for i, name in enumerate(names):
            def fn(p, i=i):
                args = [q if j != i else p for j, q in enumerate(parts)]
                return run(*args)
            err = grad_check(fn, parts[i])
            assert err < 1e-4, f"scan gradient wrt {name} ({mode}): {err:.3e}"
