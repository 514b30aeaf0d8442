"""Single-run shifted NMF minimization.

W and H follow multiplicative updates built from the frequency-domain gradient,
delays follow a damped Newton-Raphson step per sensor. Each update is accepted
only if it does not increase the cost, so a run is monotone by construction.

When every delay is an integer (in particular zero) the shifted waveforms are
nonnegative and the W/H updates reduce exactly to the Lee-Seung rules. With
fractional delays the shifted waveforms ring slightly below zero, the gradient
terms are split by sign and a multiplicative step ``x * r**alpha`` is
backtracked on ``alpha`` until the cost stops rising.
"""

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    check_n_sources,
    check_nonzero,
    check_observation,
    check_random_state,
)
from .exceptions import InvalidArgumentError, NumericalFailure
from .signal_model import (
    SolutionTuple,
    apply_delay,
    cost_weights,
    frequencies,
    phase_factors,
    reconstruction_error,
    spectral_cost,
)

logger = logging.getLogger(__name__)

_EPS = 1e-300
_MAX_BACKTRACK = 8
_IDLE_WEIGHT = 1e-6  # relative weight below which a source counts as absent


@dataclass
class SolverConfig:
    max_iterations: int = 50_000
    convergence_tol: float = 1e-8
    convergence_window: int = 100
    tau_update_period: int = 1
    tau_damping: float = 1.0
    tau_init_range: float = None  # defaults to M / 10
    shift_search_period: int = 1  # 0 disables the integer shift search
    refit_period: int = 10  # 0 disables the per-sensor rebuild
    seed: object = None

    def __post_init__(self):
        if self.max_iterations < 0:
            raise InvalidArgumentError("max_iterations must be >= 0")
        if not self.convergence_tol > 0:
            raise InvalidArgumentError("convergence_tol must be > 0")
        if self.convergence_window < 1 or self.tau_update_period < 1:
            raise InvalidArgumentError("convergence_window and tau_update_period must be >= 1")
        if not 0 < self.tau_damping <= 1:
            raise InvalidArgumentError("tau_damping must lie in (0, 1]")


class _Problem:
    """Cached spectra of V."""

    def __init__(self, V):
        self.V = V
        self.N, self.M = V.shape
        self.Vf = np.fft.rfft(V, axis=1)
        self.weights = cost_weights(self.M)
        self._shift_table = None

    @property
    def shift_table(self):
        """Phase ramps of every integer shift 0..M-1, shape (M, M // 2 + 1)."""
        if self._shift_table is None:
            self._shift_table = phase_factors(np.arange(self.M, dtype=float), self.M)
        return self._shift_table

    def cost(self, Hf, W, ph):
        return spectral_cost(self.Vf, Hf, W, ph, self.weights)


def init_random(N, D, M, seed=None, tau_range=None):
    """Random starting point: W, H ~ U(0, 1], tau ~ U[-T0, T0] with T0 = M/10."""
    check_n_sources(N, D)
    if M < 2:
        raise InvalidArgumentError("M must be >= 2")
    rng = check_random_state(seed)
    t0 = M / 10.0 if tau_range is None else float(tau_range)
    W = 1.0 - rng.random((N, D))
    H = 1.0 - rng.random((D, M))
    tau = rng.uniform(-t0, t0, size=(N, D))
    return SolutionTuple(H=H, W=W, tau=tau, seed=seed if not isinstance(seed, np.random.Generator) else None)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalFailure("non-finite value in a factor")


# -- H ---------------------------------------------------------------------

def _h_step(prob, W, H, ph, cost):
    M = prob.M
    Hf = np.fft.rfft(H, axis=1)
    model_f = np.einsum("nk,kf,nkf->nf", W, Hf, ph)
    back = np.conj(ph)
    fit = np.fft.irfft(np.einsum("nk,nf,nkf->kf", W, model_f, back), n=M, axis=1)
    data = np.fft.irfft(np.einsum("nk,nf,nkf->kf", W, prob.Vf, back), n=M, axis=1)
    # gradient = self * H + cross - data; the self term stays in the
    # denominator so a step can never exceed data / self, as in Lee-Seung
    self_term = (W ** 2).sum(axis=0)[:, None] * H
    cross = fit - self_term
    num = np.maximum(data, 0.0) + np.maximum(-cross, 0.0)
    den = self_term + np.maximum(cross, 0.0) + np.maximum(-data, 0.0)
    ratio = num / (den + _EPS)
    _check_finite(ratio)
    alpha = 1.0
    for _ in range(_MAX_BACKTRACK + 1):
        H_new = H * ratio if alpha == 1.0 else H * ratio ** alpha
        new_cost = prob.cost(np.fft.rfft(H_new, axis=1), W, ph).sum()
        if new_cost <= cost:
            return H_new, new_cost
        alpha *= 0.5
    return H, cost


# -- W ---------------------------------------------------------------------

def _w_terms(prob, H, ph):
    """Per-sensor Gram matrices and cross terms of the shifted waveforms."""
    Hf = np.fft.rfft(H, axis=1)
    Z = Hf[None, :, :] * ph
    Zw = np.conj(Z) * (2.0 * prob.weights)
    G = np.einsum("nkf,nlf->nkl", Zw, Z).real
    b = np.einsum("nkf,nf->nk", Zw, prob.Vf).real
    return G, b


def _quad(G, b, W):
    return 0.5 * np.einsum("nk,nkl,nl->n", W, G, W) - (b * W).sum(1)


def _w_step(prob, W, H, ph):
    G, b = _w_terms(prob, H, ph)
    Gp, Gm = np.maximum(G, 0.0), np.maximum(-G, 0.0)
    num = np.maximum(b, 0.0) + np.einsum("nkl,nl->nk", Gm, W)
    den = np.maximum(-b, 0.0) + np.einsum("nkl,nl->nk", Gp, W)
    ratio = num / (den + _EPS)
    _check_finite(ratio)
    f_old = _quad(G, b, W)
    W_new = W.copy()
    pending = np.ones(len(W), dtype=bool)
    alpha = 1.0
    for _ in range(_MAX_BACKTRACK + 1):
        cand = W[pending] * ratio[pending] ** alpha
        f_new = _quad(G[pending], b[pending], cand)
        ok = f_new <= f_old[pending]
        idx = np.flatnonzero(pending)
        W_new[idx[ok]] = cand[ok]
        pending[idx[ok]] = False
        if not pending.any():
            break
        alpha *= 0.5
    return W_new


# -- tau -------------------------------------------------------------------

def _tau_derivatives(prob, W, Hf, tau, ph):
    """Gradient (N, K) and Hessian (N, K, K) of the cost w.r.t. each sensor's delays."""
    M = prob.M
    w2 = 2.0 * prob.weights
    omega = frequencies(M)
    base = W[:, :, None] * Hf[None, :, :]
    Z = base * ph
    Z1 = Z * (-1j * omega)
    Z2 = Z * -(omega ** 2)
    if M % 2 == 0:
        Z1[..., -1] = base[..., -1] * (-np.pi * np.sin(np.pi * tau))
    R = prob.Vf - Z.sum(axis=1)
    Rw = np.conj(R)[:, None, :] * w2
    grad = -(Rw * Z1).real.sum(-1)
    hess = np.einsum("nkf,nlf->nkl", np.conj(Z1) * w2, Z1).real
    idx = np.arange(W.shape[1])
    hess[:, idx, idx] -= (Rw * Z2).real.sum(-1)
    return grad, hess


def _shift_search(prob, W, H, tau, ph):
    """Coordinate-wise global search over integer shifts.

    For each source in turn, every sensor's (delay, weight) pair jumps to the
    circular shift maximizing the cross-correlation between the waveform and
    the sensor's residual with that source added back, with the least-squares
    weight for that shift. A jump is kept only if it lowers the sensor's cost.
    Searching the weight jointly is what frees sensors whose weight collapsed
    to zero while their delay was wrong.
    """
    M, w = prob.M, prob.weights
    Hf = np.fft.rfft(H, axis=1)
    tau = tau.copy()
    W = W.copy()
    Z = W[:, :, None] * Hf[None, :, :] * ph
    R = prob.Vf - Z.sum(axis=1)
    cost = (w * (R.real ** 2 + R.imag ** 2)).sum(1)
    energy = (H ** 2).sum(axis=1)
    rows = np.arange(len(W))
    for i in range(H.shape[0]):
        if energy[i] == 0:
            continue
        target = R + Z[:, i]
        xcorr = np.fft.irfft(target * np.conj(Hf[i]), n=M, axis=1)
        shift = np.argmax(xcorr, axis=1)
        amp = np.maximum(xcorr[rows, shift], 0.0) / energy[i]
        z_new = amp[:, None] * Hf[i] * prob.shift_table[shift]
        r_new = target - z_new
        c_new = (w * (r_new.real ** 2 + r_new.imag ** 2)).sum(1)
        ok = c_new < cost
        tau[ok, i] = shift[ok]
        W[ok, i] = amp[ok]
        Z[ok, i] = z_new[ok]
        R[ok] = r_new[ok]
        cost[ok] = c_new[ok]
    return W, tau


def _pursuit(prob, Hf, energy, live, first=None):
    """Best-first placement of every live source on every sensor.

    With ``first`` given, that source is placed before any other.
    """
    M = prob.M
    N = prob.Vf.shape[0]
    K = len(live)
    rows = np.arange(N)
    resid = prob.Vf.copy()
    shift = np.zeros((N, K), dtype=int)
    amp = np.zeros((N, K))
    todo = np.tile(live, (N, 1))
    for rnd in range(int(live.sum())):
        best_gain = np.full(N, -1.0)
        best_src = np.zeros(N, dtype=int)
        best_shift = np.zeros(N, dtype=int)
        best_amp = np.zeros(N)
        cands = [first] if (rnd == 0 and first is not None) else np.flatnonzero(live)
        for i in cands:
            xcorr = np.fft.irfft(resid * np.conj(Hf[i]), n=M, axis=1)
            s_i = np.argmax(xcorr, axis=1)
            peak = np.maximum(xcorr[rows, s_i], 0.0)
            gain = np.where(todo[:, i], peak ** 2 / energy[i], -1.0)
            better = gain > best_gain
            best_gain[better] = gain[better]
            best_src[better] = i
            best_shift[better] = s_i[better]
            best_amp[better] = peak[better] / energy[i]
        shift[rows, best_src] = best_shift
        amp[rows, best_src] = best_amp
        todo[rows, best_src] = False
        resid -= best_amp[:, None] * Hf[best_src] * prob.shift_table[best_shift]
    return shift, amp, resid


def _coordinate_sweeps(prob, Hf, energy, live, shift, amp, resid, sweeps):
    """Re-place each source in turn against the residual of all the others."""
    M = prob.M
    rows = np.arange(len(shift))
    for _ in range(sweeps):
        for i in np.flatnonzero(live):
            resid += amp[:, i, None] * Hf[i] * prob.shift_table[shift[:, i]]
            xcorr = np.fft.irfft(resid * np.conj(Hf[i]), n=M, axis=1)
            shift[:, i] = np.argmax(xcorr, axis=1)
            amp[:, i] = np.maximum(xcorr[rows, shift[:, i]], 0.0) / energy[i]
            resid -= amp[:, i, None] * Hf[i] * prob.shift_table[shift[:, i]]
    return shift, amp


def _sensor_refit(prob, W, H, tau, ph, sweeps=2, polish=20):
    """Rebuild every sensor's delays and weights from scratch.

    Several candidates are built per sensor: best-first matching pursuit over
    integer shifts, and the same pursuit forced to start from each source,
    each followed by coordinate sweeps and a multiplicative polish of the
    weights. A sensor takes its best candidate only if that lowers its cost.
    This undoes local minima where sources are exchanged or misplaced at a
    few sensors, which single-source moves cannot leave.
    """
    N, K = W.shape
    Hf = np.fft.rfft(H, axis=1)
    energy = (H ** 2).sum(axis=1)
    live = energy > 0
    best_cost = prob.cost(Hf, W, ph)
    W = W.copy()
    tau = tau.copy()
    for first in [None] + list(np.flatnonzero(live)):
        shift, amp, resid = _pursuit(prob, Hf, energy, live, first)
        shift, amp = _coordinate_sweeps(prob, Hf, energy, live, shift, amp, resid, sweeps)
        cand_ph = prob.shift_table[shift]
        G, b = _w_terms(prob, H, cand_ph)
        G, b = G[:, live][:, :, live], b[:, live]
        a = amp[:, live]
        Gp, Gm = np.maximum(G, 0.0), np.maximum(-G, 0.0)
        for _ in range(polish):
            num = np.maximum(b, 0.0) + np.einsum("nkl,nl->nk", Gm, a)
            den = np.maximum(-b, 0.0) + np.einsum("nkl,nl->nk", Gp, a)
            a = a * num / (den + _EPS)
        cand_W = W.copy()
        cand_W[:, live] = a
        cand_tau = np.where(live, shift.astype(float), tau)
        cost = prob.cost(Hf, cand_W, cand_ph)
        ok = cost < best_cost
        W[ok] = cand_W[ok]
        tau[ok] = cand_tau[ok]
        best_cost = np.where(ok, cost, best_cost)
    return W, tau


def _newton_direction(grad, hess):
    lam, vec = np.linalg.eigh(hess)
    scale = np.abs(lam).max(axis=1, keepdims=True)
    lam = np.maximum(np.abs(lam), 1e-10 * scale + 1e-300)
    coef = np.einsum("nkl,nk->nl", vec, grad) / lam
    return -np.einsum("nkl,nl->nk", vec, coef)


def _tau_step(prob, W, H, tau, ph, damping=1.0):
    """Returns (new tau, number of sensors whose step was skipped as non-finite)."""
    M = prob.M
    Hf = np.fft.rfft(H, axis=1)
    grad, hess = _tau_derivatives(prob, W, Hf, tau, ph)
    good = np.all(np.isfinite(grad), axis=1) & np.all(np.isfinite(hess), axis=(1, 2))
    step = np.zeros_like(tau)
    if good.any():
        step[good] = _newton_direction(grad[good], hess[good])
    good &= np.all(np.isfinite(step), axis=1)
    step[~good] = 0.0
    step = np.clip(damping * step, -M / 4.0, M / 4.0)
    cost_old = prob.cost(Hf, W, ph)
    new_tau = tau.copy()
    pending = good & np.any(step != 0, axis=1)
    alpha = 1.0
    for _ in range(_MAX_BACKTRACK + 1):
        if not pending.any():
            break
        idx = np.flatnonzero(pending)
        cand = tau[idx] + alpha * step[idx]
        c_new = spectral_cost(prob.Vf[idx], Hf, W[idx], phase_factors(cand, M), prob.weights)
        ok = c_new < cost_old[idx]
        new_tau[idx[ok]] = cand[ok]
        pending[idx[ok]] = False
        alpha *= 0.5
    return new_tau, int((~good).sum())


# -- public single-update API ------------------------------------------------

def _prepare(V, sol):
    V = check_observation(V, min_rows=1)
    W = np.asarray(sol.W, dtype=float)
    H = np.asarray(sol.H, dtype=float)
    tau = np.asarray(sol.tau, dtype=float)
    if W.shape[0] != V.shape[0] or H.shape[1] != V.shape[1] or tau.shape != W.shape:
        raise InvalidArgumentError("factor shapes do not match V")
    return _Problem(V), W, H, tau


def update_H(V, sol):
    """One monotone multiplicative update of the waveforms."""
    prob, W, H, tau = _prepare(V, sol)
    ph = phase_factors(tau, prob.M)
    cost = prob.cost(np.fft.rfft(H, axis=1), W, ph).sum()
    H_new, _ = _h_step(prob, W, H, ph, cost)
    out = sol.copy()
    out.H = H_new
    return out


def update_W(V, sol):
    """One monotone multiplicative update of the mixing weights."""
    prob, W, H, tau = _prepare(V, sol)
    out = sol.copy()
    out.W = _w_step(prob, W, H, phase_factors(tau, prob.M))
    return out


def update_tau(V, sol, damping=1.0):
    """One damped, backtracked Newton step on every sensor's delays."""
    prob, W, H, tau = _prepare(V, sol)
    new_tau, skipped = _tau_step(prob, W, H, tau, phase_factors(tau, prob.M), damping)
    out = sol.copy()
    out.tau = new_tau
    out.degraded = sol.degraded or skipped > 0.5 * len(tau)
    return out


# -- gauge fixing ------------------------------------------------------------

def center_delays(H, W, tau):
    """Fix the global-shift and scale gauges.

    Each delay column is wrapped around its circular mean and shifted to zero
    mean, the waveform is rotated to compensate, and waveform rows are scaled to
    unit maximum with W absorbing the factor.
    """
    H = H.copy()
    W = W.copy()
    tau = tau.copy()
    M = H.shape[1]
    for i in range(H.shape[0]):
        # a source absent from a sensor leaves that delay arbitrary; park it
        # at the circular mean of the informative ones so it cannot drag the gauge
        idle = W[:, i] <= _IDLE_WEIGHT * W[:, i].max()
        if idle.any() and not idle.all():
            angle = 2 * np.pi * tau[~idle, i] / M
            tau[idle, i] = np.angle(np.exp(1j * angle).mean()) * M / (2 * np.pi)
        angle = 2 * np.pi * tau[:, i] / M
        ref = np.angle(np.exp(1j * angle).mean()) * M / (2 * np.pi)
        col = ref + (tau[:, i] - ref + M / 2) % M - M / 2
        shift = col.mean()
        tau[:, i] = col - shift
        if shift != 0:
            H[i] = np.maximum(apply_delay(H[i], shift), 0.0)
    peak = H.max(axis=1)
    live = peak > 0
    H[live] /= peak[live, None]
    W[:, live] *= peak[live]
    return H, W, tau


# -- full run ----------------------------------------------------------------

def solve(V, D, config=None, init=None):
    """Minimize the shifted-NMF cost for ``D`` sources from a random start.

    Numerical failure does not raise; the returned tuple has ``failed=True``.
    """
    config = config or SolverConfig()
    V = check_observation(V)
    check_nonzero(V)
    N, M = V.shape
    check_n_sources(N, D)
    if init is None:
        sol = init_random(N, D, M, config.seed, config.tau_init_range)
    else:
        sol = init.copy()
        sol.seed = config.seed if sol.seed is None else sol.seed
    if config.max_iterations == 0:
        sol.R = reconstruction_error(V, sol)
        return sol

    prob = _Problem(V)
    W, H, tau = sol.W.astype(float), sol.H.astype(float), sol.tau.astype(float)
    ph = phase_factors(tau, M)
    cost = prob.cost(np.fft.rfft(H, axis=1), W, ph).sum()
    floor = 1e-26 * float((V ** 2).sum())
    window = config.convergence_window
    history = [cost]
    skipped_total = 0
    converged = False
    it = 0
    try:
        for it in range(1, config.max_iterations + 1):
            H, cost = _h_step(prob, W, H, ph, cost)
            W = _w_step(prob, W, H, ph)
            if config.shift_search_period and it % config.shift_search_period == 0:
                W, tau = _shift_search(prob, W, H, tau, ph)
                ph = phase_factors(tau, M)
            if config.refit_period and it % config.refit_period == 0:
                W, tau = _sensor_refit(prob, W, H, tau, ph)
                ph = phase_factors(tau, M)
            if it % config.tau_update_period == 0:
                tau, skipped = _tau_step(prob, W, H, tau, ph, config.tau_damping)
                skipped_total += skipped
                ph = phase_factors(tau, M)
            cost = prob.cost(np.fft.rfft(H, axis=1), W, ph).sum()
            _check_finite(W, H, tau)
            history.append(cost)
            if cost <= floor:
                converged = True
                break
            if it >= window:
                prev = history[-window - 1]
                if prev - cost <= config.convergence_tol * prev:
                    converged = True
                    break
    except NumericalFailure:
        logger.debug("run with seed %s failed at iteration %d", config.seed, it)
        return SolutionTuple(H=H, W=W, tau=tau, R=float("nan"), seed=sol.seed, n_iter=it, failed=True)

    H, W, tau = center_delays(H, W, tau)
    out = SolutionTuple(H=H, W=W, tau=tau, seed=sol.seed, n_iter=it, converged=converged)
    out.R = reconstruction_error(V, out)
    out.degraded = skipped_total > 0.5 * N * max(1, it // config.tau_update_period)
    return out


class ShiftNMF(TransformerMixin, BaseEstimator):
    """Shifted NMF for a fixed number of sources.

    ``fit`` expects ``V`` with sensors as rows; ``transform`` returns the mixing
    weights of each sensor, mirroring ``sklearn.decomposition.NMF``.

    Attributes
    ----------
    components_ : ndarray (n_components, n_samples)
        Recovered waveforms, unit maximum.
    mixing_ : ndarray (n_sensors, n_components)
    delays_ : ndarray (n_sensors, n_components)
        Zero-mean delays per source, in samples.
    reconstruction_err_ : float
        Relative Frobenius error.
    """

    def __init__(self, n_components=1, max_iter=50_000, tol=1e-8, tau_update_period=1,
                 tau_damping=1.0, random_state=None):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.tau_update_period = tau_update_period
        self.tau_damping = tau_damping
        self.random_state = random_state

    def _config(self):
        return SolverConfig(max_iterations=self.max_iter, convergence_tol=self.tol,
                            tau_update_period=self.tau_update_period,
                            tau_damping=self.tau_damping, seed=self.random_state)

    def fit(self, V, y=None):
        sol = solve(V, self.n_components, self._config())
        if sol.failed:
            raise NumericalFailure("minimization failed; try another random_state")
        self.solution_ = sol
        self.components_ = sol.H
        self.mixing_ = sol.W
        self.delays_ = sol.tau
        self.reconstruction_err_ = sol.R
        self.n_iter_ = sol.n_iter
        return self

    def fit_transform(self, V, y=None):
        return self.fit(V).mixing_

    def transform(self, V):
        """Mixing weights of ``V`` with waveforms and delays held fixed."""
        check_is_fitted(self, "components_")
        V = check_observation(V)
        if V.shape[0] != self.mixing_.shape[0]:
            raise InvalidArgumentError("V must have the sensors the model was fitted on")
        prob = _Problem(V)
        W = np.full_like(self.mixing_, V.mean() + 1e-12)
        ph = phase_factors(self.delays_, prob.M)
        for _ in range(200):
            W = _w_step(prob, W, self.components_, ph)
        return W

    def inverse_transform(self, W):
        from .signal_model import forward_mix

        check_is_fitted(self, "components_")
        return forward_mix(W, self.components_, self.delays_)
