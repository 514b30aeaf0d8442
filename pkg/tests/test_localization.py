import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from shiftsep import localization as loc_mod
from shiftsep.exceptions import InsufficientSamplesError, InvalidArgumentError, LocalizationFailedError
from shiftsep.localization import (
    SIGMA_FLOOR,
    DelayStatistics,
    LocateConfig,
    SourceLocator,
    build_delay_stats,
    collinear_axis,
    locate,
    objective_F,
    prune,
)
from shiftsep.signal_model import SensorArray
from shiftsep.synth import make_lattice_array


def exact_stats(sources, speed, array, sigma=0.01, offset=0.0):
    xy = array.coordinates
    mean = np.array([np.hypot(xy[:, 0] - x, xy[:, 1] - y) / speed + offset for x, y in sources])
    return DelayStatistics(mean, np.full_like(mean, sigma))


def params(sources, speed):
    return np.append(np.ravel(sources), speed)


class TestDelayStatistics:
    def test_identical_solutions_hit_floor(self):
        tau = np.tile(np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]), (5, 1, 1))
        stats = build_delay_stats(tau)
        np.testing.assert_array_equal(stats.mean_tau, tau[0].T)
        assert np.all(stats.sigma_tau == SIGMA_FLOOR)

    def test_two_point(self):
        tau = np.zeros((2, 3, 1))
        tau[1, 0, 0] = 2.0
        stats = build_delay_stats(tau)
        assert stats.mean_tau[0, 0] == 1.0
        assert stats.sigma_tau[0, 0] == pytest.approx(math.sqrt(2))

    def test_matches_streaming_oracle(self, rng):
        tau = rng.normal(size=(30, 6, 3))
        stats = build_delay_stats(tau)
        # Welford's one-pass recurrence
        mean = np.zeros((6, 3))
        m2 = np.zeros((6, 3))
        for k, x in enumerate(tau, start=1):
            delta = x - mean
            mean += delta / k
            m2 += delta * (x - mean)
        np.testing.assert_allclose(stats.mean_tau, mean.T, atol=1e-12)
        np.testing.assert_allclose(stats.sigma_tau, np.sqrt(m2 / 29).T, atol=1e-12)

    def test_too_few(self):
        with pytest.raises(InsufficientSamplesError):
            build_delay_stats(np.zeros((1, 3, 2)))

    def test_reference_is_smallest_mean_delay(self):
        stats = DelayStatistics([[3.0, 1.0, 2.0], [0.0, 5.0, 1.0]], np.ones((2, 3)))
        assert list(stats.reference) == [1, 0]


class TestObjective:
    arr = make_lattice_array(16)
    truth = [(1.2, 2.1), (4.0, -1.0)]

    def test_zero_at_truth(self):
        stats = exact_stats(self.truth, 0.5, self.arr)
        assert objective_F(params(self.truth, 0.5), stats, self.arr) <= 1e-12

    def test_quadratic_in_sigma(self, rng):
        stats = exact_stats(self.truth, 0.5, self.arr, sigma=0.02)
        doubled = DelayStatistics(stats.mean_tau, 2 * stats.sigma_tau)
        p = params([(1.0, 2.0), (3.0, 0.0)], 0.6)
        assert objective_F(p, doubled, self.arr) == pytest.approx(objective_F(p, stats, self.arr) / 4, rel=1e-12)

    def test_hand_case(self):
        arr = SensorArray([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
        stats = DelayStatistics([[0.0, 1.0, 3.0]], [[0.1, 0.2, 0.3]])
        x, y, v = 0.0, 0.0, 2.0
        r = [0.0, 3.0, 4.0]
        # reference is sensor 0 (smallest mean delay)
        terms = [((0.0 - 1.0) - (r[0] - r[1]) / v) / math.sqrt(0.1 ** 2 + 0.2 ** 2),
                 ((0.0 - 3.0) - (r[0] - r[2]) / v) / math.sqrt(0.1 ** 2 + 0.3 ** 2)]
        assert objective_F([x, y, v], stats, arr) == pytest.approx(sum(t * t for t in terms), rel=1e-14)

    def test_rejects_non_positive_speed(self):
        stats = exact_stats(self.truth, 0.5, self.arr)
        with pytest.raises(InvalidArgumentError):
            objective_F(params(self.truth, 0.0), stats, self.arr)

    def test_sensor_coincident_candidate(self):
        stats = exact_stats(self.truth, 0.5, self.arr)
        assert np.isfinite(objective_F(params([(0.0, 0.0), (1.0, 1.0)], 0.5), stats, self.arr))

    @given(st.floats(-50, 50))
    def test_invariant_to_per_source_offset(self, c):
        stats = exact_stats(self.truth, 0.5, self.arr, sigma=0.05)
        shifted = stats.mean_tau.copy()
        shifted[1] += c
        p = params([(2.0, 2.0), (3.0, 1.0)], 0.7)
        moved = DelayStatistics(shifted, stats.sigma_tau)
        assert objective_F(p, moved, self.arr) == pytest.approx(objective_F(p, stats, self.arr), rel=1e-9)

    @given(st.floats(-100, 100), st.floats(-100, 100))
    def test_invariant_to_translation(self, dx, dy):
        stats = exact_stats(self.truth, 0.5, self.arr, sigma=0.05)
        src = np.array([(2.0, 2.0), (3.0, 1.0)])
        moved_arr = SensorArray(self.arr.coordinates + [dx, dy])
        base = objective_F(params(src, 0.7), stats, self.arr)
        assert objective_F(params(src + [dx, dy], 0.7), stats, moved_arr) == pytest.approx(base, rel=1e-8)

    @given(st.floats(0.01, 100))
    def test_invariant_to_joint_rescaling(self, s):
        stats = exact_stats(self.truth, 0.5, self.arr, sigma=0.05)
        src = np.array([(2.0, 2.0), (3.0, 1.0)])
        base = objective_F(params(src, 0.7), stats, self.arr)
        scaled_arr = SensorArray(self.arr.coordinates * s)
        assert objective_F(params(src * s, 0.7 * s), stats, scaled_arr) == pytest.approx(base, rel=1e-9)

    def test_analytic_jacobian(self, rng):
        stats = exact_stats(self.truth, 0.5, self.arr, sigma=0.05)
        res = loc_mod._Residuals(stats, self.arr)
        p = params([(2.0, 2.5), (3.3, 1.0)], 0.7)
        h = 1e-6
        num = np.column_stack([(res(p + h * e) - res(p - h * e)) / (2 * h) for e in np.eye(len(p))])
        np.testing.assert_allclose(res.jacobian(p), num, rtol=1e-5, atol=1e-6)


class TestPrune:
    @pytest.mark.parametrize("n", [1, 2, 7, 10, 33])
    def test_counts(self, rng, n):
        cands = np.column_stack([rng.normal(size=(n, 5)), rng.random(n)])
        stage1, cloud, _ = prune(cands, 2)
        assert len(stage1) == math.ceil(n / 2)
        assert all(len(c) == math.ceil(math.ceil(n / 2) / 2) for c in cloud)

    def test_drops_worst_objective_first(self):
        cands = np.array([[0.0, 0.0, 1.0, 5.0], [0.1, 0.0, 1.0, 0.1], [9.0, 9.0, 1.0, 0.2], [0.0, 0.1, 1.0, 9.0]])
        stage1, _, _ = prune(cands, 1)
        assert sorted(stage1[:, -1]) == [0.1, 0.2]


class TestLocate:
    arr = make_lattice_array(16)

    def test_recovers_inside_source_to_1e3(self):
        truth = [(1.3, 2.2)]
        stats = exact_stats(truth, 0.5, self.arr)
        res = locate(stats, self.arr, LocateConfig(n_starts=40, seed=1))
        np.testing.assert_allclose(res.sources, truth, atol=1e-3)
        assert res.speed == pytest.approx(0.5, abs=1e-3)
        assert res.objective >= 0 and res.speed > 0

    def test_global_minimum_against_grid(self):
        truth = [(2.4, 0.7)]
        stats = exact_stats(truth, 0.8, self.arr, sigma=0.05)
        res = locate(stats, self.arr, LocateConfig(n_starts=40, seed=2))
        xs = np.linspace(-4.5, 7.5, 49)
        vs = np.linspace(0.2, 2.0, 37)
        grid = min(objective_F([x, y, v], stats, self.arr) for x in xs for y in xs for v in vs)
        assert res.objective <= grid + 1e-9

    def test_mirror_modes_on_collinear_array(self):
        arr = SensorArray([[float(i), 0.0] for i in range(6)])
        stats = exact_stats([(2.5, 2.0)], 0.5, arr)
        res = locate(stats, arr, LocateConfig(n_starts=60, seed=0))
        good = res.candidates[res.candidates[:, -1] < 1e-8]
        assert np.any(good[:, 1] > 1.9) and np.any(good[:, 1] < -1.9)
        ys = res.cloud[0][:, 1]
        assert np.any(ys > 1.9) and np.any(ys < -1.9)
        assert res.to_dict()["mirror_ambiguous"]

    def test_planar_array_not_flagged(self):
        assert collinear_axis(self.arr) is None
        assert collinear_axis(SensorArray([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])) is not None

    def test_all_starts_fail(self, monkeypatch):
        monkeypatch.setattr(loc_mod, "_local_fit", lambda job: None)
        with pytest.raises(LocalizationFailedError) as err:
            locate(exact_stats([(1.0, 1.0)], 0.5, self.arr), self.arr, LocateConfig(n_starts=3))
        assert err.value.diagnostics["n_starts"] == 3

    def test_sensor_count_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            locate(exact_stats([(1.0, 1.0)], 0.5, make_lattice_array(4)), self.arr)

    def test_deterministic(self):
        stats = exact_stats([(1.0, 2.0)], 0.5, self.arr, sigma=0.1)
        a = locate(stats, self.arr, LocateConfig(n_starts=10, seed=3))
        b = locate(stats, self.arr, LocateConfig(n_starts=10, seed=3))
        assert np.array_equal(a.candidates, b.candidates)


class TestSourceLocator:
    def test_fit_from_samples(self, rng):
        arr = make_lattice_array(16)
        stats = exact_stats([(1.0, 2.0)], 0.5, arr)
        samples = stats.mean_tau.T[None] + 0.001 * rng.normal(size=(20, 16, 1))
        est = SourceLocator(n_starts=20).fit(samples, arr)
        np.testing.assert_allclose(est.sources_, [(1.0, 2.0)], atol=0.05)
        assert est.score(sensor_array=arr) <= 0
        assert clone(est).get_params() == est.get_params()
