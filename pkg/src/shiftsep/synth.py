"""Synthetic datasets: random mixtures, physical propagation and correlated pairs."""

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_random_state
from .exceptions import ConstructionFailedError, InvalidArgumentError
from .signal_model import SensorArray, cosine_distance, forward_mix

logger = logging.getLogger(__name__)

WAVEFORM_KINDS = ("gaussian-pulse", "double-pulse", "raised-cosine-burst", "chirp-burst", "custom-samples")
DECAY_LAWS = ("inv-sqrt-r", "inv-r", "inv-r2")
R_MIN = 1e-3


@dataclass
class WaveformSpec:
    """Parametric waveform; ``render`` returns it sampled, nonnegative, unit maximum.

    Parameters by kind (positions and lengths in samples):

    * gaussian-pulse: ``center``, ``width``
    * double-pulse: ``center``, ``width``, ``separation``, ``ratio`` (second/first height)
    * raised-cosine-burst: ``start``, ``length``, ``period`` (``period == length`` gives one lobe)
    * chirp-burst: ``start``, ``length``, ``f0``, ``f1`` (cycles per sample)
    * custom-samples: ``samples``
    """

    kind: str
    params: dict = field(default_factory=dict)
    length: int = 128

    def __post_init__(self):
        if self.kind not in WAVEFORM_KINDS:
            raise InvalidArgumentError(f"unknown waveform kind {self.kind!r}; expected one of {WAVEFORM_KINDS}")
        if self.kind == "custom-samples":
            self.length = len(self.params["samples"])
        if self.length < 2:
            raise InvalidArgumentError("waveform length must be at least 2")

    def render(self):
        t = np.arange(self.length, dtype=float)
        p = self.params
        if self.kind == "gaussian-pulse":
            x = _gauss(t, p["center"], p["width"])
        elif self.kind == "double-pulse":
            x = _gauss(t, p["center"], p["width"]) + p.get("ratio", 1.0) * _gauss(
                t, p["center"] + p["separation"], p["width"])
        elif self.kind == "raised-cosine-burst":
            x = _window(t, p["start"], p["length"]) * 0.5 * (1 - np.cos(2 * np.pi * (t - p["start"]) / p["period"]))
        elif self.kind == "chirp-burst":
            u = t - p["start"]
            phase = 2 * np.pi * (p["f0"] * u + 0.5 * (p["f1"] - p["f0"]) * u ** 2 / p["length"])
            x = _window(t, p["start"], p["length"]) * 0.5 * (1 - np.cos(phase))
        else:
            x = np.asarray(p["samples"], dtype=float)
            if x.ndim != 1 or not np.all(np.isfinite(x)):
                raise InvalidArgumentError("custom samples must be a finite 1-D sequence")
            if np.any(x < 0):
                raise InvalidArgumentError("custom samples must be nonnegative")
        peak = x.max()
        if peak <= 0:
            raise InvalidArgumentError(f"{self.kind} waveform is identically zero")
        return x / peak


def _gauss(t, c, w):
    return np.exp(-0.5 * ((t - c) / w) ** 2)


def _window(t, start, length):
    return ((t >= start) & (t < start + length)).astype(float)


def render_waveforms(waveforms):
    """Stack specs or raw arrays into a ``K x M`` source matrix."""
    rows = [w.render() if isinstance(w, WaveformSpec) else np.asarray(w, dtype=float) for w in waveforms]
    if not rows:
        raise InvalidArgumentError("at least one waveform is required")
    if len({r.shape for r in rows}) != 1 or rows[0].ndim != 1:
        raise InvalidArgumentError("waveforms must be 1-D and of equal length")
    H = np.vstack(rows)
    if np.any(H < 0) or not np.all(np.isfinite(H)):
        raise InvalidArgumentError("waveforms must be finite and nonnegative")
    return H


# Default library. The chirp and the multi-period burst are distinct enough
# under arbitrary shifts that random restarts separate them reliably.
LIBRARY = {
    "pulse": WaveformSpec("gaussian-pulse", {"center": 40, "width": 3}),
    "chirp": WaveformSpec("chirp-burst", {"start": 30, "length": 50, "f0": 1 / 16, "f1": 1 / 5}),
    "hump": WaveformSpec("raised-cosine-burst", {"start": 30, "length": 50, "period": 50}),
    "burst": WaveformSpec("raised-cosine-burst", {"start": 30, "length": 48, "period": 8}),
    "double": WaveformSpec("double-pulse", {"center": 30, "width": 3, "separation": 22, "ratio": 1.0}),
    # staggered in time, for the propagation presets
    "early-pulse": WaveformSpec("gaussian-pulse", {"center": 20, "width": 3}),
    "mid-chirp": WaveformSpec("chirp-burst", {"start": 30, "length": 40, "f0": 1 / 16, "f1": 1 / 5}),
    "late-burst": WaveformSpec("raised-cosine-burst", {"start": 60, "length": 48, "period": 8}),
}


@dataclass
class SyntheticDataset:
    V: np.ndarray
    truth: dict
    array: SensorArray
    noise_sigma: float = 0.0
    sample_interval: float = 1.0


def make_lattice_array(n_sensors, spacing=1.0):
    """Rectangular lattice with the most nearly square ``rows x cols`` factorization.

    16, 18 and 24 sensors give 4x4, 3x6 and 4x6 grids. Rows run along y.
    """
    if not isinstance(n_sensors, (int, np.integer)) or n_sensors < 2:
        raise InvalidArgumentError(f"n_sensors must be an integer >= 2, got {n_sensors!r}")
    if spacing <= 0:
        raise InvalidArgumentError("spacing must be positive")
    rows = max(d for d in range(1, math.isqrt(n_sensors) + 1) if n_sensors % d == 0)
    if rows == 1 and n_sensors > 3:
        raise InvalidArgumentError(f"{n_sensors} sensors cannot form a rectangular lattice")
    cols = n_sensors // rows
    yy, xx = np.divmod(np.arange(n_sensors), cols)
    return SensorArray(np.column_stack([xx, yy]).astype(float) * spacing)


def _add_noise(V, noise_sigma, rng):
    if noise_sigma < 0:
        raise InvalidArgumentError("noise_sigma must be nonnegative")
    if noise_sigma == 0:
        return V
    return np.maximum(V + rng.normal(0.0, noise_sigma, V.shape), 0.0)


def generate_random(waveforms, array, seed=None, noise_sigma=0.0, fractional=False, max_delay=None):
    """Random mixing weights in (0, 1] and random delays in ``[0, M/8]``.

    Delays are integers unless ``fractional`` is set.
    """
    H = render_waveforms(waveforms)
    K, M = H.shape
    N = len(array)
    if K >= N:
        raise InvalidArgumentError(f"need more sensors ({N}) than waveforms ({K})")
    rng = check_random_state(seed)
    hi = M / 8 if max_delay is None else max_delay
    W = 1.0 - rng.random((N, K))
    if fractional:
        tau = rng.uniform(0.0, hi, (N, K))
    else:
        tau = rng.integers(0, int(hi) + 1, (N, K)).astype(float)
    V = _add_noise(forward_mix(W, H, tau), noise_sigma, rng)
    truth = {"H": H, "W": W, "tau": tau, "seed": seed, "kind": "random"}
    return SyntheticDataset(V=V, truth=truth, array=array, noise_sigma=noise_sigma)


def decay(r, law):
    r = np.maximum(np.asarray(r, dtype=float), R_MIN)
    if law == "inv-sqrt-r":
        return 1.0 / np.sqrt(r)
    if law == "inv-r":
        return 1.0 / r
    if law == "inv-r2":
        return 1.0 / r ** 2
    raise InvalidArgumentError(f"unknown decay law {law!r}; expected one of {DECAY_LAWS}")


def source_distances(source_coords, array):
    """``N x K`` matrix of sensor-to-source distances."""
    src = np.asarray(source_coords, dtype=float).reshape(-1, 2)
    d = array.coordinates[:, None, :] - src[None, :, :]
    return np.sqrt((d ** 2).sum(-1))


def generate_physical(waveforms, source_coords, amplitudes, speed, decay_law, array,
                      seed=None, noise_sigma=0.0, sample_interval=1.0):
    """Propagate each source to every sensor at ``speed`` with amplitude decay.

    Delays are travel times in samples (``r / speed / sample_interval``);
    weights are ``amplitude * decay(r)``.
    """
    H = render_waveforms(waveforms)
    src = np.asarray(source_coords, dtype=float).reshape(-1, 2)
    amps = np.asarray(amplitudes, dtype=float)
    K = H.shape[0]
    if src.shape[0] != K or amps.shape != (K,):
        raise InvalidArgumentError("need one coordinate pair and one amplitude per waveform")
    if not speed > 0:
        raise InvalidArgumentError("speed must be positive")
    if np.any(amps <= 0) or np.any(amps > 1):
        raise InvalidArgumentError("amplitudes must lie in (0, 1]")
    if decay_law not in DECAY_LAWS:
        raise InvalidArgumentError(f"unknown decay law {decay_law!r}; expected one of {DECAY_LAWS}")
    r = source_distances(src, array)
    if np.any(r < R_MIN):
        warnings.warn(f"source within {R_MIN} of a sensor; distance clamped for the decay law", RuntimeWarning)
    tau = r / speed / sample_interval
    W = amps[None, :] * decay(r, decay_law)
    rng = check_random_state(seed)
    V = _add_noise(forward_mix(W, H, tau), noise_sigma, rng)
    truth = {"H": H, "W": W, "tau": tau, "seed": seed, "kind": "physical",
             "sources": src, "speed": float(speed), "decay_law": decay_law,
             "amplitudes": amps}
    return SyntheticDataset(V=V, truth=truth, array=array, noise_sigma=noise_sigma,
                            sample_interval=sample_interval)


def cosine_similarity(a, b):
    return 1.0 - cosine_distance(a, b)


def generate_correlated_pair(base, target_cosine_similarity, seed=None, partner=None, tol=0.02):
    """Return ``(w1, w2)`` whose cosine similarity is ``target_cosine_similarity``.

    ``w2`` blends ``w1`` with a partner waveform; the blend weight is found by
    bisection. The default partner is a chirp burst placed after ``w1`` with
    its position drawn from ``seed``.
    """
    target = float(target_cosine_similarity)
    if not 0.0 <= target <= 0.99:
        raise InvalidArgumentError("target similarity must lie in [0, 0.99]")
    w1 = base.render() if isinstance(base, WaveformSpec) else np.asarray(base, dtype=float)
    M = w1.size
    if partner is None:
        rng = check_random_state(seed)
        end = int(np.flatnonzero(w1 > 1e-3 * w1.max())[-1])
        start = (end + 1 + int(rng.integers(0, 5))) % M
        chirp = WaveformSpec("chirp-burst", {"start": 0, "length": min(50, M), "f0": 1 / 16, "f1": 1 / 5},
                             length=M)
        partner = np.roll(chirp.render(), start)
    w_ind = partner.render() if isinstance(partner, WaveformSpec) else np.asarray(partner, dtype=float)

    def blend(a):
        x = (1.0 - a) * w1 + a * w_ind
        return x / x.max()

    lo, hi = 0.0, 1.0  # similarity falls from 1 at a=0 to sim(w1, partner) at a=1
    if cosine_similarity(w1, blend(hi)) > target + tol:
        raise ConstructionFailedError(
            f"partner waveform is already {cosine_similarity(w1, w_ind):.3f} similar; "
            f"cannot reach {target}")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        s = cosine_similarity(w1, blend(mid))
        if abs(s - target) <= 1e-4:
            break
        if s > target:
            lo = mid
        else:
            hi = mid
    w2 = blend(mid)
    if abs(cosine_similarity(w1, w2) - target) > tol:
        raise ConstructionFailedError(f"could not reach similarity {target} within {tol}")
    return w1 / w1.max(), w2
