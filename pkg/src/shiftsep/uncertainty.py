"""Posterior sampling with the Robust Adaptive Metropolis algorithm.

The proposal is ``x + S u`` with ``u`` standard normal. After every step the
factor ``S`` is updated so that ``S S^T`` grows along ``u`` when the move was
accepted more often than the target rate and shrinks otherwise:

    S' S'^T = S (I + eta_n (alpha - alpha*) u u^T / |u|^2) S^T,  eta_n = min(1, d n^-gamma)

which drives the acceptance rate to ``alpha*`` (Vihola, 2012).
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_random_state
from .exceptions import InvalidArgumentError


@dataclass
class McmcConfig:
    chain_length: int = 100_000
    burn_in: int = 10_000
    target_acceptance: float = 0.234
    adaptation_decay: float = 0.66
    seed: object = 0
    lower: np.ndarray = None  # uniform prior box
    upper: np.ndarray = None
    initial_cov: np.ndarray = None
    snapshot_every: int = 1000

    def __post_init__(self):
        if not 0 <= self.burn_in < self.chain_length:
            raise InvalidArgumentError("burn_in must lie in [0, chain_length)")
        if not 0 < self.target_acceptance < 1:
            raise InvalidArgumentError("target_acceptance must lie in (0, 1)")
        if not 0.5 < self.adaptation_decay <= 1:
            raise InvalidArgumentError("adaptation_decay must lie in (0.5, 1]")


@dataclass
class Chain:
    samples: np.ndarray  # (chain_length, d), includes burn-in
    log_likelihood: np.ndarray
    acceptance_rate: float
    factor: np.ndarray  # final proposal factor S
    factor_history: list = field(default_factory=list, repr=False)


def ram_sample(log_likelihood, x0, config=None):
    """Run one RAM chain from ``x0``; proposals outside the prior box are rejected."""
    config = config or McmcConfig()
    x = np.array(x0, dtype=float)
    d = x.size
    lower = np.full(d, -np.inf) if config.lower is None else np.asarray(config.lower, dtype=float)
    upper = np.full(d, np.inf) if config.upper is None else np.asarray(config.upper, dtype=float)

    def log_post(y):
        if np.any(y < lower) or np.any(y > upper):
            return -np.inf
        return float(log_likelihood(y))

    lp = log_post(x)
    if not np.isfinite(lp):
        raise InvalidArgumentError("log-likelihood is not finite at the starting point")
    if config.initial_cov is not None:
        S = np.linalg.cholesky(np.asarray(config.initial_cov, dtype=float))
    else:
        width = np.where(np.isfinite(upper - lower), upper - lower, 1.0)
        S = np.diag(0.01 * width)
    rng = check_random_state(config.seed)
    n = config.chain_length
    out = np.empty((n, d))
    lls = np.empty(n)
    accepted = 0
    history = []
    eye = np.eye(d)
    for k in range(n):
        u = rng.standard_normal(d)
        y = x + S @ u
        lp_y = log_post(y)
        alpha = 0.0 if not np.isfinite(lp_y) else min(1.0, float(np.exp(min(0.0, lp_y - lp))))
        if rng.random() < alpha:
            x, lp = y, lp_y
            accepted += 1
        out[k] = x
        lls[k] = lp
        eta = min(1.0, d * (k + 1) ** (-config.adaptation_decay))
        uu = u @ u
        if uu > 0:
            A = eye + (eta * (alpha - config.target_acceptance) / uu) * np.outer(u, u)
            S = np.linalg.cholesky(S @ A @ S.T)
        if config.snapshot_every and (k + 1) % config.snapshot_every == 0:
            history.append(S.copy())
    return Chain(samples=out, log_likelihood=lls, acceptance_rate=accepted / n, factor=S,
                 factor_history=history)


def effective_sample_size(x):
    """Geyer initial-positive-sequence estimate for a 1-D series."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.var(x) == 0:
        return float(n)
    y = x - x.mean()
    f = np.fft.rfft(y, n=2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    rho = acov / acov[0]
    total = 0.0
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        total += pair
    tau = max(2 * total - 1, 1e-12)
    return float(min(n, n / tau))


@dataclass
class PosteriorSummary:
    names: list
    mean: np.ndarray
    std: np.ndarray
    two_sigma: np.ndarray
    corr: np.ndarray
    ess: np.ndarray
    acceptance_rate: float
    n_samples: int
    degenerate: bool = False

    def to_dict(self):
        return {"parameters": {n: {"mean": float(m), "std": float(s), "two_sigma": float(t), "ess": float(e)}
                               for n, m, s, t, e in zip(self.names, self.mean, self.std, self.two_sigma, self.ess)},
                "correlation": {"names": self.names, "matrix": self.corr.tolist()},
                "acceptance_rate": self.acceptance_rate, "n_samples": self.n_samples,
                "degenerate": self.degenerate}


def parameter_names(K):
    return [f"{c}{j}" for j in range(1, K + 1) for c in "xy"] + ["v"]


def summarize(chain, burn_in, names=None):
    """Post-burn-in moments, 2-sigma half-widths, correlations and ESS."""
    samples = chain.samples if isinstance(chain, Chain) else np.asarray(chain, dtype=float)
    rate = chain.acceptance_rate if isinstance(chain, Chain) else float("nan")
    if samples.ndim == 1:
        samples = samples[:, None]
    if not 0 <= burn_in < len(samples):
        raise InvalidArgumentError("burn_in must leave at least one sample")
    post = samples[burn_in:]
    d = post.shape[1]
    names = list(names) if names is not None else [f"p{i + 1}" for i in range(d)]
    mean = post.mean(axis=0)
    cov = np.atleast_2d(np.cov(post, rowvar=False)) if len(post) > 1 else np.zeros((d, d))
    std = np.sqrt(np.diag(cov))
    live = std > 0
    corr = np.eye(d)
    if live.sum() >= 2:
        s = std[live]
        corr[np.ix_(live, live)] = np.clip(cov[np.ix_(live, live)] / np.outer(s, s), -1.0, 1.0)
        np.fill_diagonal(corr, 1.0)
    ess = np.array([effective_sample_size(post[:, i]) for i in range(d)])
    return PosteriorSummary(names=names, mean=mean, std=std, two_sigma=2 * std, corr=corr, ess=ess,
                            acceptance_rate=rate, n_samples=len(post), degenerate=bool(not live.all()))


def gauss_newton_cov(residuals, params, jacobian):
    """Laplace covariance of ``exp(-|r|^2 / 2)`` at ``params``: ``(J^T J)^-1``."""
    J = jacobian(params)
    JTJ = J.T @ J
    try:
        cov = np.linalg.inv(JTJ)
    except np.linalg.LinAlgError:
        return None
    cov = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(cov)) or np.any(np.linalg.eigvalsh(cov) <= 0):
        return None
    return cov


def posterior(stats, array, start, config=None, coord_bounds=None, speed_bounds=(1e-3, 10.0)):
    """Sample source positions and speed with likelihood ``exp(-F / 2)``.

    ``start`` is a parameter vector or a ``LocalizationResult``. Returns the
    chain and its summary.
    """
    from .localization import LocateConfig, _Residuals, parameter_bounds

    if hasattr(start, "sources"):
        start = np.append(start.sources.ravel(), start.speed)
    start = np.asarray(start, dtype=float)
    res = _Residuals(stats, array)
    K = stats.n_sources
    config = config or McmcConfig()
    lo, hi = LocateConfig(coord_bounds=coord_bounds).resolve_bounds(array)
    lower, upper = parameter_bounds(K, lo, hi, speed_bounds)
    cfg = McmcConfig(**{**config.__dict__})
    if cfg.lower is None:
        cfg.lower, cfg.upper = lower, upper
    if cfg.initial_cov is None:
        cov = gauss_newton_cov(res, start, res.jacobian)
        if cov is not None:
            cfg.initial_cov = cov * 2.38 ** 2 / len(start)

    def loglik(p):
        r = res(p)
        return -0.5 * float(r @ r)

    chain = ram_sample(loglik, start, cfg)
    return chain, summarize(chain, cfg.burn_in, parameter_names(K))
