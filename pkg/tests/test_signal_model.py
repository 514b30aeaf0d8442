import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_factors
from shiftsep.exceptions import DegenerateInputError, InvalidArgumentError
from shiftsep.signal_model import (
    SensorArray,
    SolutionTuple,
    apply_delay,
    cosine_distance,
    cosine_distance_matrix,
    forward_mix,
    parseval_cost,
    reconstruction_error,
)


def delay_oracle(s, d):
    """Full complex DFT with signed frequencies; real part taken at the end."""
    M = len(s)
    k = np.fft.fftfreq(M, d=1.0 / M)
    return np.real(np.fft.ifft(np.fft.fft(s) * np.exp(-2j * np.pi * k * d / M)))


def mix_oracle(W, H, tau):
    N, K = W.shape
    out = np.zeros((N, H.shape[1]))
    for n in range(N):
        for i in range(K):
            out[n] += W[n, i] * delay_oracle(H[i], tau[n, i])
    return out


signals = st.integers(2, 33).flatmap(
    lambda M: st.lists(st.floats(0, 10), min_size=M, max_size=M)).map(np.array)
# a real Nyquist bin cannot carry a fractional phase, so exact composition of
# fractional delays needs an odd length
odd_signals = st.integers(1, 16).flatmap(
    lambda h: st.lists(st.floats(0, 10), min_size=2 * h + 1, max_size=2 * h + 1)).map(np.array)


class TestApplyDelay:
    def test_zero_delay_is_identity(self, rng):
        s = rng.random(17)
        assert np.array_equal(apply_delay(s, 0.0), s)

    @pytest.mark.parametrize("M", [7, 16])
    def test_full_period_delay(self, rng, M):
        s = rng.random(M)
        np.testing.assert_allclose(apply_delay(s, M), s, atol=1e-9)

    @pytest.mark.parametrize("M", [2, 3, 8, 15, 32])
    def test_integer_delay_is_circular_rotation(self, rng, M):
        s = rng.random(M)
        for d in range(M + 1):
            np.testing.assert_allclose(apply_delay(s, d), np.roll(s, d), atol=1e-9)

    @given(signals, st.floats(-40, 40))
    def test_matches_full_dft_oracle(self, s, d):
        np.testing.assert_allclose(apply_delay(s, d), delay_oracle(s, d), atol=1e-9)

    @given(odd_signals, st.floats(-5, 5), st.floats(-5, 5))
    def test_delays_compose(self, s, d1, d2):
        np.testing.assert_allclose(apply_delay(apply_delay(s, d1), d2), apply_delay(s, d1 + d2), atol=1e-9)

    @given(signals, st.integers(-40, 40), st.floats(-5, 5))
    def test_integer_then_fractional_compose(self, s, d1, d2):
        np.testing.assert_allclose(apply_delay(apply_delay(s, d1), d2), apply_delay(s, d1 + d2), atol=1e-9)

    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-20, 20))
    def test_linear(self, a, b, d):
        rng = np.random.default_rng(0)
        s1, s2 = rng.random(12), rng.random(12)
        lhs = apply_delay(a * s1 + b * s2, d)
        np.testing.assert_allclose(lhs, a * apply_delay(s1, d) + b * apply_delay(s2, d), atol=1e-9)

    def test_rejects_non_finite_delay(self):
        with pytest.raises(InvalidArgumentError):
            apply_delay(np.ones(4), np.nan)


class TestForwardMix:
    def test_zero_mixing(self, rng):
        W, H, tau = random_factors(rng)
        assert np.all(forward_mix(np.zeros_like(W), H, tau) == 0)

    def test_identity_mixing(self, rng):
        h = rng.random(9)
        np.testing.assert_allclose(forward_mix(np.ones((1, 1)), h[None], np.zeros((1, 1))), h[None])

    def test_hand_case(self):
        V = forward_mix(np.array([[1.0], [2.0]]), np.array([[1.0, 0, 0, 0, 0, 0]]), np.array([[0.0], [3.0]]))
        np.testing.assert_allclose(V[1], [0, 0, 0, 2, 0, 0], atol=1e-12)

    def test_matches_oracle(self, rng):
        W, H, tau = random_factors(rng, N=5, K=3, M=21)
        np.testing.assert_allclose(forward_mix(W, H, tau), mix_oracle(W, H, tau), atol=1e-9)

    def test_dimension_mismatch(self, rng):
        W, H, tau = random_factors(rng)
        with pytest.raises(InvalidArgumentError):
            forward_mix(W, H, tau[:, :1])

    def test_global_shift_is_counter_rotation(self, rng):
        W, H, tau = random_factors(rng, N=4, K=2, M=21)
        c = 1.7
        tau2 = tau.copy()
        tau2[:, 0] += c
        H2 = H.copy()
        H2[0] = apply_delay(H[0], -c)
        np.testing.assert_allclose(forward_mix(W, H2, tau2), forward_mix(W, H, tau), atol=1e-9)


class TestReconstructionError:
    def test_exact(self, rng):
        W, H, tau = random_factors(rng)
        V = forward_mix(W, H, tau)
        assert reconstruction_error(V, (W, H, tau)) <= 1e-9

    def test_zero_model(self, rng):
        W, H, tau = random_factors(rng)
        V = rng.random((4, 16))
        assert reconstruction_error(V, (0 * W, 0 * H, 0 * tau)) == pytest.approx(1.0)

    def test_brute_force(self, rng):
        W, H, tau = random_factors(rng, N=3, K=2, M=11)
        V = rng.random((3, 11))
        model = mix_oracle(W, H, tau)
        num = sum((V[n, m] - model[n, m]) ** 2 for n in range(3) for m in range(11))
        den = sum(V[n, m] ** 2 for n in range(3) for m in range(11))
        assert reconstruction_error(V, SolutionTuple(H, W, tau)) == pytest.approx(np.sqrt(num / den), abs=1e-9)

    def test_zero_observation(self, rng):
        W, H, tau = random_factors(rng)
        with pytest.raises(DegenerateInputError):
            reconstruction_error(np.zeros((4, 16)), (W, H, tau))


class TestCosineDistance:
    def test_self(self, rng):
        a = rng.random(5)
        assert cosine_distance(a, a) == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_distance([1, 0], [0, 1]) == 1.0

    def test_hand_value(self):
        assert cosine_distance([1, 0], [1, 1]) == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-12)

    def test_zero_vector(self):
        with pytest.raises(DegenerateInputError):
            cosine_distance([0, 0], [1, 1])

    @given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, ca, cb):
        a, b = np.array([0.2, 1.0, 3.0]), np.array([1.0, 0.5, 0.1])
        assert cosine_distance(ca * a, cb * b) == pytest.approx(cosine_distance(a, b), abs=1e-12)

    def test_nonnegative_vectors_in_unit_interval(self, rng):
        D = cosine_distance_matrix(rng.random((6, 9)))
        assert np.all((D >= 0) & (D <= 1))

    def test_matrix_matches_scalar(self, rng):
        X, Y = rng.random((3, 5)), rng.random((4, 5))
        D = cosine_distance_matrix(X, Y)
        for i in range(3):
            for j in range(4):
                assert D[i, j] == pytest.approx(cosine_distance(X[i], Y[j]), abs=1e-12)


class TestParsevalCost:
    def test_exact_is_zero(self, rng):
        W, H, tau = random_factors(rng)
        assert parseval_cost(forward_mix(W, H, tau), (W, H, tau)) <= 1e-9

    def test_no_delay_is_frobenius(self, rng):
        W, H, _ = random_factors(rng)
        V = rng.random((4, 16))
        expected = 0.5 * np.sum((V - W @ H) ** 2)
        assert parseval_cost(V, (W, H, np.zeros((4, 2)))) == pytest.approx(expected, abs=1e-9)

    @given(st.integers(0, 10_000), st.integers(2, 24))
    def test_equals_time_domain_cost(self, seed, M):
        rng = np.random.default_rng(seed)
        W, H, tau = random_factors(rng, N=3, K=2, M=M)
        V = rng.random((3, M))
        expected = 0.5 * np.sum((V - mix_oracle(W, H, tau)) ** 2)
        assert parseval_cost(V, (W, H, tau)) == pytest.approx(expected, rel=1e-6, abs=1e-12)


class TestSensorArray:
    def test_l_max(self):
        arr = SensorArray([[0, 0], [3, 4], [1, 0]])
        assert arr.l_max == pytest.approx(5.0)

    @pytest.mark.parametrize("coords", [[[0, 0]], [[0, 0], [0, 0]], [[0, 0, 0], [1, 1, 1]], [[0, np.inf], [1, 1]]])
    def test_invalid(self, coords):
        with pytest.raises(InvalidArgumentError):
            SensorArray(coords)
