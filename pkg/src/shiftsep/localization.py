"""Source positions and propagation speed from delay statistics.

Delays of one source at two sensors differ by the difference of the two
source-sensor distances divided by the speed. The weighted squared mismatch of
that relation, summed over sources and over sensors against each source's
reference sensor (the one with the smallest mean delay), is the objective
``F``. It is minimized from many random starts; the cloud of local minima is
pruned by objective value and then by distance to the per-source median.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator

from ._validation import check_random_state
from .exceptions import InsufficientSamplesError, InvalidArgumentError, LocalizationFailedError
from .signal_model import SensorArray

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4


@dataclass
class DelayStatistics:
    """Per (source, sensor) delay mean and sample standard deviation, both ``K x N``."""

    mean_tau: np.ndarray
    sigma_tau: np.ndarray
    n_samples: int = 0
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        self.mean_tau = np.atleast_2d(np.asarray(self.mean_tau, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma_tau, dtype=float))
        if sigma.shape != self.mean_tau.shape:
            raise InvalidArgumentError("mean_tau and sigma_tau must have the same shape")
        if np.any(sigma < 0) or not np.all(np.isfinite(sigma)) or not np.all(np.isfinite(self.mean_tau)):
            raise InvalidArgumentError("delay statistics must be finite with nonnegative sigma")
        self.sigma_tau = np.maximum(sigma, self.sigma_floor)

    @property
    def n_sources(self):
        return self.mean_tau.shape[0]

    @property
    def n_sensors(self):
        return self.mean_tau.shape[1]

    @property
    def reference(self):
        """Index of the sensor with the smallest mean delay, per source."""
        return np.argmin(self.mean_tau, axis=1)


def build_delay_stats(samples, sigma_floor=SIGMA_FLOOR):
    """Delay statistics from aligned samples.

    ``samples`` is a clustered ``RunEnsemble`` or an array ``(P, N, K)`` of
    delays whose source columns already correspond across solutions.
    """
    if hasattr(samples, "aligned"):
        samples = samples.aligned("tau")
    tau = np.asarray(samples, dtype=float)
    if tau.ndim != 3:
        raise InvalidArgumentError(f"expected delays of shape (P, N, K), got {tau.shape}")
    P = tau.shape[0]
    if P < 2:
        raise InsufficientSamplesError(f"delay statistics need at least 2 solutions, got {P}")
    mean = tau.mean(axis=0).T
    sigma = tau.std(axis=0, ddof=1).T
    return DelayStatistics(mean, sigma, n_samples=P, sigma_floor=sigma_floor)


def _unpack(params, K):
    params = np.asarray(params, dtype=float)
    if params.shape != (2 * K + 1,):
        raise InvalidArgumentError(f"expected {2 * K + 1} parameters (x1, y1, ..., xK, yK, v), got {params.shape}")
    return params[:-1].reshape(K, 2), params[-1]


class _Residuals:
    """Weighted residuals of ``F`` and their Jacobian for a fixed reference choice."""

    def __init__(self, stats, array):
        if stats.n_sensors != len(array):
            raise InvalidArgumentError(
                f"delay statistics cover {stats.n_sensors} sensors but the array has {len(array)}")
        self.K, self.N = stats.mean_tau.shape
        self.xy = array.coordinates
        self.ref = stats.reference
        k = np.arange(self.K)
        self.mask = np.ones((self.K, self.N), dtype=bool)
        self.mask[k, self.ref] = False
        self.dtau = stats.mean_tau[k, self.ref][:, None] - stats.mean_tau
        self.scale = np.sqrt(stats.sigma_tau[k, self.ref][:, None] ** 2 + stats.sigma_tau ** 2)

    def distances(self, src):
        d = src[:, None, :] - self.xy[None, :, :]
        return np.sqrt((d ** 2).sum(-1)), d

    def __call__(self, params):
        src, v = _unpack(params, self.K)
        r, _ = self.distances(src)
        dr = r[np.arange(self.K), self.ref][:, None] - r
        return ((self.dtau - dr / v) / self.scale)[self.mask]

    def jacobian(self, params):
        src, v = _unpack(params, self.K)
        r, d = self.distances(src)
        k = np.arange(self.K)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(r[..., None] > 0, d / r[..., None], 0.0)  # d r / d source
        dr = r[k, self.ref][:, None] - r
        grad_src = -(unit[k, self.ref][:, None, :] - unit) / (v * self.scale)[..., None]  # (K, N, 2)
        J = np.zeros((self.K, self.N, 2 * self.K + 1))
        for j in range(self.K):
            J[j, :, 2 * j:2 * j + 2] = grad_src[j]
        J[:, :, -1] = dr / (v ** 2 * self.scale)
        return J[self.mask]


def objective_F(params, stats, array):
    """Weighted squared delay-difference mismatch for ``params = (x1, y1, ..., xK, yK, v)``."""
    _, v = _unpack(params, stats.n_sources)
    if not v > 0:
        raise InvalidArgumentError(f"speed must be positive, got {v}")
    res = _Residuals(stats, array)(params)
    return float(res @ res)


@dataclass
class LocateConfig:
    n_starts: int = 1000
    coord_bounds: tuple = None  # ((xmin, ymin), (xmax, ymax)); default 3x the sensor box
    speed_bounds: tuple = (1e-3, 10.0)
    seed: object = 0

    def resolve_bounds(self, array):
        if self.coord_bounds is None:
            lo, hi = array.bounds
            center, half = (lo + hi) / 2, 1.5 * (hi - lo)
            half = np.where(half > 0, half, 1.5 * max(float(np.max(hi - lo)), 1.0))
            return center - half, center + half
        lo, hi = (np.asarray(b, dtype=float) for b in self.coord_bounds)
        if np.any(hi <= lo):
            raise InvalidArgumentError("coordinate bounds must have hi > lo")
        return lo, hi


def parameter_bounds(K, coord_lo, coord_hi, speed_bounds):
    lo = np.concatenate([np.tile(coord_lo, K), [speed_bounds[0]]])
    hi = np.concatenate([np.tile(coord_hi, K), [speed_bounds[1]]])
    return lo, hi


@dataclass
class LocalizationResult:
    sources: np.ndarray
    speed: float
    objective: float
    cloud: list = field(repr=False)  # per source, (n_kept, 2)
    candidates: np.ndarray = field(repr=False)  # converged starts, rows (params..., F)
    reference: np.ndarray = None
    n_starts: int = 0
    mirror_line: tuple = None  # (point, unit direction) when the array is collinear

    @property
    def n_converged(self):
        return len(self.candidates)

    def to_dict(self):
        return {"sources": [{"x": float(x), "y": float(y)} for x, y in self.sources],
                "speed": self.speed, "objective": self.objective,
                "n_starts": self.n_starts, "n_converged": self.n_converged,
                "reference_sensors": [int(i) for i in self.reference],
                "mirror_ambiguous": self.mirror_line is not None}


def _local_fit(args):
    residuals, x0, lo, hi = args
    try:
        fit = least_squares(residuals, x0, jac=residuals.jacobian, bounds=(lo, hi), method="trf",
                            x_scale="jac", xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000)
    except (ValueError, np.linalg.LinAlgError):
        return None
    if fit.status <= 0 or not np.all(np.isfinite(fit.x)) or not np.isfinite(fit.cost):
        return None
    return np.append(fit.x, 2.0 * fit.cost)


def collinear_axis(array, tol=1e-9):
    """``(point, direction)`` of the line through all sensors, or None."""
    xy = array.coordinates
    c = xy.mean(axis=0)
    _, s, vt = np.linalg.svd(xy - c, full_matrices=False)
    if s.size < 2 or s[1] <= tol * max(s[0], 1.0):
        return c, vt[0]
    return None


def _fold(xy, line):
    # reflect everything onto the left of the line; mirror pairs coincide
    c, u = line
    rel = xy - c
    along = rel @ u
    across = np.abs(rel @ np.array([-u[1], u[0]]))
    return np.column_stack([along, across])


def prune(candidates, K, mirror_line=None):
    """Keep the better half by objective, then per source the half nearest the median.

    With ``mirror_line`` the median distance is measured after folding the
    candidates across it, so both reflected modes survive into the cloud.
    """
    order = np.argsort(candidates[:, -1], kind="stable")
    stage1 = candidates[order[:math.ceil(len(candidates) / 2)]]
    n_keep = math.ceil(len(stage1) / 2)
    cloud, kept_idx = [], []
    for j in range(K):
        xy = stage1[:, 2 * j:2 * j + 2]
        pos = xy if mirror_line is None else _fold(xy, mirror_line)
        dist = np.linalg.norm(pos - np.median(pos, axis=0), axis=1)
        idx = np.argsort(dist, kind="stable")[:n_keep]
        kept_idx.append(set(idx.tolist()))
        cloud.append(xy[idx])
    return stage1, cloud, kept_idx


def locate(stats, array, config=None, workers=1):
    config = config or LocateConfig()
    if config.n_starts < 1:
        raise InvalidArgumentError("n_starts must be at least 1")
    residuals = _Residuals(stats, array)
    K = stats.n_sources
    coord_lo, coord_hi = config.resolve_bounds(array)
    lo, hi = parameter_bounds(K, coord_lo, coord_hi, config.speed_bounds)
    rng = check_random_state(config.seed)
    starts = rng.uniform(lo, hi, size=(config.n_starts, len(lo)))
    jobs = [(residuals, x0, lo, hi) for x0 in starts]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            fits = list(pool.map(_local_fit, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        fits = [_local_fit(j) for j in jobs]
    good = [f for f in fits if f is not None]
    if not good:
        raise LocalizationFailedError("no multistart minimization converged",
                                      {"n_starts": config.n_starts, "bounds": [lo.tolist(), hi.tolist()]})
    candidates = np.array(good)
    line = collinear_axis(array)
    stage1, cloud, kept = prune(candidates, K, line)
    common = set.intersection(*kept)
    pool_idx = sorted(common) if common else range(len(stage1))
    best = stage1[min(pool_idx, key=lambda i: stage1[i, -1])]
    return LocalizationResult(sources=best[:-2].reshape(K, 2), speed=float(best[-2]),
                              objective=float(best[-1]), cloud=cloud, candidates=candidates,
                              reference=stats.reference, n_starts=config.n_starts, mirror_line=line)


class SourceLocator(BaseEstimator):
    """Estimator wrapper around ``locate``.

    ``fit(delays, sensor_array)`` takes aligned delay samples ``(P, N, K)`` or a
    ``DelayStatistics``; afterwards ``sources_``, ``speed_``, ``objective_``
    and ``result_`` are set.
    """

    def __init__(self, n_starts=1000, coord_bounds=None, speed_bounds=(1e-3, 10.0), random_state=0, n_jobs=1):
        self.n_starts = n_starts
        self.coord_bounds = coord_bounds
        self.speed_bounds = speed_bounds
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, delays, sensor_array):
        if not isinstance(sensor_array, SensorArray):
            sensor_array = SensorArray(sensor_array)
        stats = delays if isinstance(delays, DelayStatistics) else build_delay_stats(delays)
        cfg = LocateConfig(self.n_starts, self.coord_bounds, self.speed_bounds, self.random_state)
        self.result_ = locate(stats, sensor_array, cfg, workers=self.n_jobs)
        self.stats_ = stats
        self.sources_ = self.result_.sources
        self.speed_ = self.result_.speed
        self.objective_ = self.result_.objective
        return self

    def score(self, delays=None, sensor_array=None):
        """Negative objective at the fitted parameters (higher is better)."""
        stats = self.stats_ if delays is None else (
            delays if isinstance(delays, DelayStatistics) else build_delay_stats(delays))
        array = sensor_array if sensor_array is not None else None
        if array is None:
            raise InvalidArgumentError("sensor_array is required")
        params = np.append(self.sources_.ravel(), self.speed_)
        return -objective_F(params, stats, array)
