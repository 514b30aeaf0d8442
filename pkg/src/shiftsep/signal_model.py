"""Delayed-mixture signal model.

Observations are stored sensors-by-samples (``V`` is ``N x M``), mixing weights
sensors-by-sources (``W`` is ``N x K``), waveforms sources-by-samples (``H`` is
``K x M``) and delays sensors-by-sources (``tau`` is ``N x K``, in samples).

A delay is applied as a phase ramp on the real FFT of a waveform, so shifts are
circular and may be fractional. For even ``M`` the Nyquist bin of a real signal
cannot carry a complex phase; it is scaled by ``cos(pi * tau)`` instead, which
is exactly what taking the real part of the inverse transform would do.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import check_factors, check_nonzero, check_observation
from .exceptions import DegenerateInputError, InvalidArgumentError


@dataclass
class SolutionTuple:
    """One minimization result ``[H; W; tau]`` and its relative error ``R``."""

    H: np.ndarray
    W: np.ndarray
    tau: np.ndarray
    R: float = float("nan")
    seed: object = None
    n_iter: int = 0
    converged: bool = False
    failed: bool = False
    degraded: bool = False

    @property
    def n_sources(self):
        return self.H.shape[0]

    def copy(self):
        return replace(self, H=self.H.copy(), W=self.W.copy(), tau=self.tau.copy())


@dataclass
class SensorArray:
    """Planar sensor coordinates; row order matches the rows of ``V``."""

    coordinates: np.ndarray
    ids: list = field(default=None)

    def __post_init__(self):
        xy = np.asarray(self.coordinates, dtype=float)
        if xy.ndim != 2 or xy.shape[1] != 2:
            raise InvalidArgumentError(f"sensor coordinates must be (N, 2), got {xy.shape}")
        if xy.shape[0] < 2:
            raise InvalidArgumentError("a sensor array needs at least 2 sensors")
        if not np.all(np.isfinite(xy)):
            raise InvalidArgumentError("sensor coordinates must be finite")
        if len(np.unique(xy, axis=0)) != len(xy):
            raise InvalidArgumentError("sensor coordinates must be distinct")
        self.coordinates = xy
        if self.ids is None:
            self.ids = list(range(len(xy)))

    def __len__(self):
        return len(self.coordinates)

    @property
    def distances(self):
        d = self.coordinates[:, None, :] - self.coordinates[None, :, :]
        return np.sqrt((d ** 2).sum(-1))

    @property
    def l_max(self):
        """Largest pairwise sensor distance."""
        return float(self.distances.max())

    @property
    def bounds(self):
        return self.coordinates.min(axis=0), self.coordinates.max(axis=0)


def frequencies(M):
    """Angular frequency of each real-FFT bin for a length-``M`` signal."""
    return 2.0 * np.pi * np.arange(M // 2 + 1) / M


def phase_factors(tau, M, order=0):
    """Phase ramps ``exp(-i w tau)`` (or their ``order``-th tau-derivative).

    Returns an array of shape ``tau.shape + (M // 2 + 1,)``. The ramp is built
    as successive powers of one unit phasor per delay, which is far cheaper than
    evaluating trig functions bin by bin.
    """
    tau = np.asarray(tau, dtype=float)
    n_bins = M // 2 + 1
    out = np.empty(tau.shape + (n_bins,), dtype=complex)
    out[..., 0] = 1.0
    if n_bins > 1:
        out[..., 1:] = np.exp(-2j * np.pi * tau / M)[..., None]
        np.cumprod(out, axis=-1, out=out)
    if order:
        out *= (-1j * frequencies(M)) ** order
    if M % 2 == 0:
        # Nyquist bin: real part of the complex ramp and its derivatives
        nyq = np.pi * tau
        if order == 0:
            out[..., -1] = np.cos(nyq)
        elif order == 1:
            out[..., -1] = -np.pi * np.sin(nyq)
        elif order == 2:
            out[..., -1] = -np.pi ** 2 * np.cos(nyq)
        else:
            raise ValueError("order must be 0, 1 or 2")
    return out


def parseval_weights(M):
    """Multiplicity of each real-FFT bin in the full DFT."""
    w = np.full(M // 2 + 1, 2.0)
    w[0] = 1.0
    if M % 2 == 0:
        w[-1] = 1.0
    return w


def apply_delay(signal, delay):
    """Delay ``signal`` by ``delay`` samples (circular, fractional allowed).

    Integer delays reproduce ``np.roll(signal, delay)`` up to rounding.
    """
    s = np.asarray(signal, dtype=float)
    if s.ndim != 1 or s.size < 2:
        raise InvalidArgumentError("signal must be a 1-D array with at least 2 samples")
    if not np.isfinite(delay):
        raise InvalidArgumentError(f"delay must be finite, got {delay!r}")
    if delay == 0:
        return s.copy()
    M = s.size
    return np.fft.irfft(np.fft.rfft(s) * phase_factors(delay, M), n=M)


def shifted_sources(H, tau):
    """All delayed waveforms, shape ``(N, K, M)``; entry ``[n, i]`` is source i at sensor n."""
    M = H.shape[1]
    Hf = np.fft.rfft(H, axis=1)
    return np.fft.irfft(Hf[None, :, :] * phase_factors(tau, M), n=M, axis=-1)


def forward_mix(W, H, tau):
    """Noise-free mixtures: row n is ``sum_i W[n, i] * apply_delay(H[i], tau[n, i])``."""
    W, H, tau = check_factors(W, H, tau)
    return np.einsum("nk,nkm->nm", W, shifted_sources(H, tau))


def _as_factors(sol):
    if isinstance(sol, SolutionTuple):
        return check_factors(sol.W, sol.H, sol.tau)
    W, H, tau = sol
    return check_factors(W, H, tau)


def reconstruction_error(V, sol):
    """Relative Frobenius error ``||V - model|| / ||V||``."""
    V = check_observation(V, min_rows=1)
    norm = check_nonzero(V)
    W, H, tau = _as_factors(sol)
    if W.shape[0] != V.shape[0] or H.shape[1] != V.shape[1]:
        raise InvalidArgumentError("factor shapes do not match V")
    return float(np.linalg.norm(V - forward_mix(W, H, tau)) / norm)


def cosine_distance(a, b):
    """``1 - cos(angle(a, b))``."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise InvalidArgumentError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine distance is undefined for a zero vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def cosine_distance_matrix(X, Y=None):
    """Pairwise cosine distances between the rows of ``X`` (and ``Y``)."""
    X = np.asarray(X, dtype=float)
    Y = X if Y is None else np.asarray(Y, dtype=float)
    nx = np.linalg.norm(X, axis=1)
    ny = np.linalg.norm(Y, axis=1)
    if np.any(nx == 0) or np.any(ny == 0):
        raise DegenerateInputError("cosine distance is undefined for a zero vector")
    D = 1.0 - (X @ Y.T) / np.outer(nx, ny)
    return np.clip(D, 0.0, 2.0)


def cost_weights(M):
    """Per-bin weights turning a sum over real-FFT bins into the half squared time-domain error."""
    return parseval_weights(M) / (2.0 * M)


def spectral_cost(Vf, Hf, W, ph, weights):
    """Half squared error per sensor from spectra, shape ``(N,)``.

    ``ph`` are the phase ramps of the delays and ``weights`` come from
    ``cost_weights``.
    """
    resid = Vf - np.einsum("nk,kf,nkf->nf", W, Hf, ph)
    return (weights * (resid.real ** 2 + resid.imag ** 2)).sum(axis=1)


def parseval_cost(V, sol):
    """Half squared reconstruction error, evaluated in the frequency domain."""
    V = check_observation(V, min_rows=1)
    W, H, tau = _as_factors(sol)
    if W.shape[0] != V.shape[0] or H.shape[1] != V.shape[1]:
        raise InvalidArgumentError("factor shapes do not match V")
    M = V.shape[1]
    Vf = np.fft.rfft(V, axis=1)
    Hf = np.fft.rfft(H, axis=1)
    return float(spectral_cost(Vf, Hf, W, phase_factors(tau, M), cost_weights(M)).sum())
