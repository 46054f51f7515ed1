import numpy as np
import pytest

from conftest import stable_params
from s6snn.errors import LengthMismatchError, NonFiniteError, SingularMatrixError
from s6snn.ssm import (
    DELTA_MAX,
    DELTA_MIN,
    ContinuousSSMParams,
    DiscreteSSMParams,
    build_kernel,
    causal_convolve,
    discretize,
    forward_conv,
    forward_recurrent,
    hippo_legs,
    init_continuous,
    sigma_clip,
    sigma_logistic,
    spectral_radius,
)


def _direct_conv(w, x):
    L = len(x)
    return np.array([sum(w[j] * x[i - j] for j in range(i + 1)) for i in range(L)])


class TestHippo:
    def test_n1(self):
        np.testing.assert_array_equal(hippo_legs(1), [[-1.0]])

    def test_n2(self):
        np.testing.assert_allclose(hippo_legs(2), [[-1.0, 0.0], [-np.sqrt(3.0), -2.0]], rtol=0, atol=1e-15)

    def test_n3_element(self):
        assert hippo_legs(3)[2, 1] == pytest.approx(-np.sqrt(5.0) * np.sqrt(3.0), rel=1e-15)

    @pytest.mark.parametrize("n", range(1, 17))
    def test_closed_form(self, n):
        M = hippo_legs(n)
        for m in range(n):
            for k in range(n):
                if m > k:
                    expected = -np.sqrt(2 * m + 1) * np.sqrt(2 * k + 1)
                elif m == k:
                    expected = -(m + 1)
                else:
                    expected = 0.0
                assert M[m, k] == pytest.approx(expected, rel=1e-14, abs=0)
        assert np.all(np.triu(M, k=1) == 0)
        assert np.all(np.diag(M) < 0)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            hippo_legs(0)


class TestContinuousParams:
    def test_d_fixed_at_zero(self):
        with pytest.raises(ValueError):
            ContinuousSSMParams(A=np.zeros((2, 2)), B=np.ones((2, 1)), C=np.ones((1, 2)), log_delta=0.0, D=1.0)

    def test_delta_clamped(self):
        p = ContinuousSSMParams(A=np.zeros((1, 1)), B=np.ones((1, 1)), C=np.ones((1, 1)), log_delta=np.array([5.0, -20.0]))
        np.testing.assert_allclose(p.delta, [DELTA_MAX, DELTA_MIN])
        assert not p.delta_is_interior.any()

    def test_init_in_range(self, rng):
        p = init_continuous(8, heads=5, rng=rng)
        assert p.A.shape == (5, 8, 8) and p.B.shape == (5, 8, 1) and p.C.shape == (5, 1, 8)
        assert np.all((p.delta >= DELTA_MIN) & (p.delta <= DELTA_MAX))
        np.testing.assert_allclose(p.A[3], hippo_legs(8))


class TestDiscretize:
    def test_zero_A_gives_identity(self):
        B = np.array([[1.0], [2.0], [-1.0]])
        p = ContinuousSSMParams(A=np.zeros((3, 3)), B=B, C=np.ones((1, 3)), log_delta=np.log(0.05))
        d = discretize(p)
        np.testing.assert_array_equal(d.A_bar, np.eye(3))
        np.testing.assert_allclose(d.B_bar, 0.05 * B, rtol=1e-12)

    def test_scalar_system(self):
        p = ContinuousSSMParams(A=np.array([[-2.0]]), B=np.ones((1, 1)), C=np.ones((1, 1)), log_delta=np.log(0.1))
        d = discretize(p)
        assert d.A_bar[0, 0] == pytest.approx(0.9 / 1.1, rel=1e-12)
        assert d.B_bar[0, 0] == pytest.approx(0.1 / 1.1, rel=1e-12)

    def test_C_passes_through(self, rng):
        p = stable_params(5, rng)
        np.testing.assert_array_equal(discretize(p).C_bar, p.C)

    def test_heads_match_single(self, rng):
        p = init_continuous(4, heads=3, rng=rng)
        d = discretize(p)
        for h in range(3):
            single = discretize(ContinuousSSMParams(A=p.A[h], B=p.B[h], C=p.C[h], log_delta=p.log_delta[h]))
            np.testing.assert_allclose(d.A_bar[h], single.A_bar, rtol=1e-12)
            np.testing.assert_allclose(d.B_bar[h], single.B_bar, rtol=1e-12)

    def test_singular(self):
        # I - Δ/2·A vanishes for A = (2/Δ)·I
        p = ContinuousSSMParams(A=20.0 * np.eye(2), B=np.ones((2, 1)), C=np.ones((1, 2)), log_delta=np.log(0.1))
        with pytest.raises(SingularMatrixError):
            discretize(p)

    def test_hippo_is_stable(self, rng):
        d = discretize(init_continuous(16, heads=4, rng=rng))
        assert spectral_radius(d.A_bar) < 1.0


class TestBuildKernel:
    def test_identity(self):
        d = DiscreteSSMParams(A_bar=np.eye(3), B_bar=np.array([[1.0], [0], [0]]), C_bar=np.array([[1.0, 0, 0]]))
        np.testing.assert_allclose(build_kernel(d, 4).weights, [1, 1, 1, 1])

    def test_nilpotent(self):
        d = DiscreteSSMParams(A_bar=np.zeros((2, 2)), B_bar=np.array([[1.0], [2.0]]), C_bar=np.array([[3.0, 0.5]]))
        np.testing.assert_allclose(build_kernel(d, 3).weights, [4.0, 0.0, 0.0])

    def test_matches_matrix_powers(self, stable_discrete):
        d = stable_discrete(4)
        expected = [
            (d.C_bar @ np.linalg.matrix_power(d.A_bar, i) @ d.B_bar).item() for i in range(8)
        ]
        k = build_kernel(d, 8)
        np.testing.assert_allclose(k.weights, expected, rtol=1e-10, atol=1e-14)
        assert k.basis.shape == (1, 8, 4)

    def test_overflow_reports_radius(self):
        d = DiscreteSSMParams(A_bar=2.0 * np.eye(2), B_bar=np.ones((2, 1)), C_bar=np.ones((1, 2)))
        with pytest.raises(NonFiniteError, match="spectral radius"):
            build_kernel(d, 2000)

    def test_rejects_empty(self, stable_discrete):
        with pytest.raises(ValueError):
            build_kernel(stable_discrete(2), 0)


class TestForwardPaths:
    def test_zero_input(self, stable_discrete):
        states, y = forward_recurrent(stable_discrete(4), np.zeros(10))
        assert not states.any() and not y.any()

    def test_impulse_gives_kernel(self, stable_discrete):
        d = stable_discrete(4)
        x = np.zeros(12)
        x[0] = 1.0
        _, y = forward_recurrent(d, x)
        np.testing.assert_allclose(y, build_kernel(d, 12).weights, atol=1e-14)

    def test_first_state(self, stable_discrete):
        d = stable_discrete(3)
        x = np.array([1.0, 0.0, 1.0])
        states, _ = forward_recurrent(d, x)
        np.testing.assert_allclose(states[0], d.B_bar[:, 0])

    def test_recurrent_equals_conv(self, stable_discrete, rng):
        d = stable_discrete(4)
        x = (rng.random(32) < 0.4).astype(float)
        _, y_rec = forward_recurrent(d, x)
        y_conv = forward_conv(build_kernel(d, 32), x)
        np.testing.assert_allclose(y_conv, y_rec, rtol=0, atol=1e-6)

    def test_conv_impulse(self, stable_discrete):
        k = build_kernel(stable_discrete(3), 70)
        x = np.zeros(70)
        x[0] = 1.0
        np.testing.assert_allclose(forward_conv(k, x), k.weights, atol=1e-12)

    def test_conv_cumsum(self):
        d = DiscreteSSMParams(A_bar=np.eye(1), B_bar=np.ones((1, 1)), C_bar=np.ones((1, 1)))
        for L in (10, 100):
            y = forward_conv(build_kernel(d, L), np.ones(L))
            np.testing.assert_allclose(y, np.arange(1, L + 1), atol=1e-8)

    def test_fft_matches_direct_sum(self, rng):
        w = rng.normal(size=128)
        x = rng.normal(size=128)
        np.testing.assert_allclose(causal_convolve(w, x), _direct_conv(w, x), rtol=0, atol=1e-8)

    def test_length_mismatch(self, stable_discrete):
        with pytest.raises(LengthMismatchError):
            forward_conv(build_kernel(stable_discrete(2), 16), np.zeros(17))

    def test_time_invariance(self, stable_discrete):
        d = stable_discrete(4)
        k = build_kernel(d, 40)
        x1 = np.zeros(40)
        x1[5] = 1.0
        x2 = np.zeros(40)
        x2[12] = 1.0
        y1, y2 = forward_conv(k, x1), forward_conv(k, x2)
        np.testing.assert_allclose(y2[12:], y1[5:33], atol=1e-12)
        assert not y2[:12].any()

    def test_linearity(self, stable_discrete, rng):
        k = build_kernel(stable_discrete(4), 80)
        a = (rng.random(80) < 0.3).astype(float)
        b = (rng.random(80) < 0.3).astype(float)
        np.testing.assert_allclose(forward_conv(k, a + b), forward_conv(k, a) + forward_conv(k, b), atol=1e-10)

    def test_batched_input(self, stable_discrete, rng):
        d = stable_discrete(3)
        x = (rng.random((5, 20)) < 0.5).astype(float)
        _, y_rec = forward_recurrent(d, x)
        np.testing.assert_allclose(forward_conv(build_kernel(d, 20), x), y_rec, atol=1e-10)

    def test_oracle_sweep(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for trial in range(200):
            n = (2, 4, 8, 16)[trial % 4]
            L = (16, 64, 256)[trial % 3]
            p = ContinuousSSMParams(
                A=hippo_legs(n),
                B=rng.normal(size=(n, 1)),
                C=rng.normal(size=(1, n)),
                log_delta=rng.uniform(np.log(DELTA_MIN), np.log(DELTA_MAX)),
            )
            d = discretize(p)
            x = (rng.random(L) < 0.5).astype(float)
            _, y_rec = forward_recurrent(d, x)
            worst = max(worst, np.max(np.abs(forward_conv(build_kernel(d, L), x) - y_rec)))
        assert worst <= 1e-6


class TestSigma:
    def test_clip_examples(self):
        assert sigma_clip(0.5) == 0.5
        assert sigma_clip(-3.2) == 0.0 and sigma_clip(17.0) == 1.0
        np.testing.assert_array_equal(sigma_clip(np.array([-1, 0, 0.25, 1, 2])), [0, 0, 0.25, 1, 1])

    def test_logistic_range(self):
        y = sigma_logistic(np.array([-50.0, 0.0, 50.0]))
        assert y[1] == 0.5
        assert np.all((y >= 0) & (y <= 1))
