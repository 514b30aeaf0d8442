"""Choosing the number of sources from the stability of many random restarts.

For each candidate ``D`` an ensemble of independent solver runs is built,
poor or unphysical runs are discarded, the waveforms are clustered into ``D``
groups holding exactly one waveform of every run, and the candidate is scored
by the average silhouette of that clustering and by the mean reconstruction
error.
"""

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator
from sklearn.metrics import silhouette_samples

from ._validation import check_n_sources, check_nonzero, check_observation
from .exceptions import (
    EnsembleUnderfilledError,
    InvalidArgumentError,
    SelectionDegenerateError,
)
from .signal_model import SensorArray, cosine_distance_matrix
from .solver import SolverConfig, solve

logger = logging.getLogger(__name__)


@dataclass
class EliminationConfig:
    outlier_fraction: float = 0.10
    cv_cutoff: float = 0.8
    speed_hint: float = None
    sensor_array: SensorArray = None

    def __post_init__(self):
        if not 0 <= self.outlier_fraction < 1:
            raise InvalidArgumentError("outlier_fraction must lie in [0, 1)")
        if not self.cv_cutoff > 0:
            raise InvalidArgumentError("cv_cutoff must be positive")
        if self.speed_hint is not None and not self.speed_hint > 0:
            raise InvalidArgumentError("speed_hint must be positive")


@dataclass
class RunEnsemble:
    """Solutions for one candidate source count.

    ``assignments[p, i]`` is the cluster of source ``i`` of solution ``p``;
    every row is a permutation of ``range(D)``.
    """

    D: int
    solutions: list
    assignments: np.ndarray = None
    centroids: np.ndarray = None
    avg_silhouette: float = float("nan")
    n_raw: int = 0
    n_attempts: int = 0
    n_outliers: int = 0
    n_unphysical: int = 0
    criterion: str = ""
    cluster_converged: bool = True

    @property
    def avg_R(self):
        return float(np.mean([s.R for s in self.solutions])) if self.solutions else float("nan")

    @property
    def retained(self):
        return len(self.solutions)

    def aligned(self, name):
        """Stack attribute ``name`` of every solution with sources in cluster order.

        ``"H"`` gives ``(P, D, M)``; ``"W"`` and ``"tau"`` give ``(P, N, D)``.
        """
        if self.assignments is None:
            raise InvalidArgumentError("ensemble has not been clustered")
        out = []
        for sol, perm in zip(self.solutions, self.assignments):
            order = np.argsort(perm)  # order[c] = source index in cluster c
            arr = getattr(sol, name)
            out.append(arr[order] if name == "H" else arr[:, order])
        return np.array(out)

    def centroid_triple(self):
        """Cluster-aligned means of H, W and tau."""
        return self.centroids, self.aligned("W").mean(axis=0), self.aligned("tau").mean(axis=0)


def derive_seeds(master_seed, n):
    """``n`` distinct integer seeds drawn reproducibly from ``master_seed``."""
    ss = master_seed if isinstance(master_seed, np.random.SeedSequence) else np.random.SeedSequence(master_seed)
    children = ss.spawn(n)
    seeds = [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]
    if len(set(seeds)) != n:  # astronomically unlikely, but cheap to rule out
        raise InvalidArgumentError("seed derivation produced a collision; pick another master seed")
    return seeds


def _run_one(args):
    V, D, config, seed = args
    cfg = SolverConfig(**{**config.__dict__, "seed": seed})
    sol = solve(V, D, cfg)
    if not sol.failed and np.any(sol.H.max(axis=1) <= 0):
        sol.failed = True  # a source vanished
    return sol


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def default_workers():
    env = os.environ.get("SHIFTSEP_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise InvalidArgumentError(f"SHIFTSEP_WORKERS must be an integer, got {env!r}") from None
        if n >= 1:
            return n
    return os.cpu_count() or 1


def run_ensemble(V, D, P_raw, solver_config=None, master_seed=0, workers=1):
    """Run ``P_raw`` independent solves, retrying failed runs up to ``2 * P_raw`` attempts."""
    V = check_observation(V)
    check_nonzero(V)
    check_n_sources(V.shape[0], D)
    if P_raw < 10:
        raise InvalidArgumentError(f"an ensemble needs at least 10 runs, got {P_raw}")
    config = solver_config or SolverConfig()
    seeds = derive_seeds(master_seed, 2 * P_raw)
    done, next_seed = [], 0
    while len(done) < P_raw and next_seed < len(seeds):
        batch = seeds[next_seed:next_seed + P_raw - len(done)]
        next_seed += len(batch)
        results = _map(_run_one, [(V, D, config, s) for s in batch], workers)
        done.extend(r for r in results if not r.failed)
    # results come back in submission order, i.e. ordered by derived-seed index
    ensemble = RunEnsemble(D=D, solutions=done, n_raw=len(done), n_attempts=next_seed)
    if len(done) < P_raw:
        raise EnsembleUnderfilledError(
            f"only {len(done)} of {P_raw} runs completed after {next_seed} attempts for D={D}", ensemble)
    return ensemble


def delay_cv(tau):
    """Per-source coefficient of variation of delays offset to a zero minimum.

    Returns ``(cv, mean)``, both of shape ``(D,)``; ``cv`` is 0 where the mean is 0.
    """
    shifted = tau - tau.min(axis=0, keepdims=True)
    mean = shifted.mean(axis=0)
    std = shifted.std(axis=0, ddof=1) if len(tau) > 1 else np.zeros(tau.shape[1])
    out = np.zeros_like(mean)
    ok = mean > 0
    out[ok] = std[ok] / mean[ok]
    return out, mean


def eliminate(ensemble, config=None):
    """Drop the worst-fitting runs, then physically implausible ones.

    Outliers by R go first; then the maximum-travel-time bound is applied when
    the sensor geometry and a speed are known, or the delay-spread CV bound
    otherwise.
    """
    config = config or EliminationConfig()
    sols = list(ensemble.solutions)
    if not sols:
        raise SelectionDegenerateError(f"empty ensemble for D={ensemble.D}")
    n_drop = math.ceil(config.outlier_fraction * len(sols))
    order = np.argsort([s.R for s in sols], kind="stable")
    keep = np.sort(order[:len(sols) - n_drop])
    sols = [sols[i] for i in keep]

    if config.sensor_array is not None and config.speed_hint is not None:
        t_max = config.sensor_array.l_max / config.speed_hint
        criterion = f"t_max={t_max:.6g}"

        def physical(sol):
            spread = sol.tau.max(axis=0) - sol.tau.min(axis=0)
            return bool(np.all(spread <= t_max))
    else:
        criterion = f"cv<{config.cv_cutoff}"
        if config.sensor_array is not None or config.speed_hint is not None:
            logger.info("travel-time bound needs both sensor geometry and a speed; using the CV approximation")

        def physical(sol):
            cv, mean = delay_cv(sol.tau)
            M = sol.H.shape[1]
            cv = np.where(mean < 1e-9 * M, 0.0, cv)
            return bool(np.all(cv < config.cv_cutoff))

    kept = [s for s in sols if physical(s)]
    out = RunEnsemble(D=ensemble.D, solutions=kept, n_raw=ensemble.n_raw, n_attempts=ensemble.n_attempts,
                      n_outliers=n_drop, n_unphysical=len(sols) - len(kept), criterion=criterion)
    if not kept:
        raise SelectionDegenerateError(
            f"all {ensemble.n_raw} solutions eliminated for D={ensemble.D} "
            f"({n_drop} by R, {len(sols)} by {criterion})")
    return out


def match_to_centroids(H, centroids):
    """Optimal one-to-one assignment of the rows of ``H`` to centroids by cosine distance.

    Returns ``perm`` with ``perm[i]`` = centroid of row ``i``, and the total cost.
    """
    cost = cosine_distance_matrix(H, centroids)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(H), dtype=int)
    perm[rows] = cols
    return perm, float(cost[rows, cols].sum())


def cluster_equal_size(ensemble, max_rounds=100):
    """Cluster waveforms so that each cluster takes exactly one source of every solution."""
    sols = ensemble.solutions
    if len(sols) < 2:
        raise InvalidArgumentError("clustering needs at least 2 solutions")
    D = ensemble.D
    best = int(np.argmin([s.R for s in sols]))
    centroids = sols[best].H.copy()
    assignments = None
    converged = False
    for _ in range(max_rounds):
        new = np.array([match_to_centroids(s.H, centroids)[0] for s in sols])
        stacked = np.array([s.H[np.argsort(p)] for s, p in zip(sols, new)])
        centroids = stacked.mean(axis=0)
        if assignments is not None and np.array_equal(new, assignments):
            converged = True
            break
        assignments = new
    if not converged:
        logger.warning("equal-size clustering did not settle within %d rounds (D=%d)", max_rounds, D)
    out = RunEnsemble(**{**ensemble.__dict__})
    out.assignments = assignments
    out.centroids = centroids
    out.cluster_converged = converged
    sizes = np.bincount(assignments.ravel(), minlength=D)
    assert np.all(sizes == len(sols)), "equal-size clustering violated"
    return out


def silhouette_values(ensemble):
    """Silhouette of every clustered waveform under cosine distance, shape ``(P * D,)``."""
    X = np.concatenate([s.H for s in ensemble.solutions])
    labels = ensemble.assignments.ravel()
    if ensemble.D == 1:
        return np.ones(len(X))
    if len(ensemble.solutions) < 2:
        return np.zeros(len(X))
    dist = cosine_distance_matrix(X)
    np.fill_diagonal(dist, 0.0)
    return silhouette_samples(dist, labels, metric="precomputed")


def avg_silhouette(ensemble):
    """Mean silhouette width; 1.0 for a single cluster by convention."""
    if ensemble.D == 1:
        return 1.0
    return float(np.mean(silhouette_values(ensemble)))


@dataclass
class SelectionReport:
    table: list
    selected_K: int
    compromise: bool
    H: np.ndarray
    W: np.ndarray
    tau: np.ndarray
    ensembles: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        return {"table": self.table, "selected_K": self.selected_K, "compromise": self.compromise}


def choose_K(table, silhouette_floor=0.9, r_slack=0.05):
    """Apply the selection rule to score rows ``{D, silhouette, avg_R}``.

    The largest ``D`` whose silhouette clears the floor and whose mean error is
    within ``r_slack`` of the best mean error over all ``D' >= D``. If no ``D``
    qualifies, the best silhouette among those meeting the error condition is
    returned with ``compromise=True``.
    """
    rows = sorted((r for r in table if np.isfinite(r["avg_R"])), key=lambda r: r["D"])
    if not rows:
        raise SelectionDegenerateError("no candidate produced a usable ensemble")
    fits = []
    for i, r in enumerate(rows):
        best_after = min(x["avg_R"] for x in rows[i:])
        if r["avg_R"] <= best_after + r_slack:
            fits.append(r)
    good = [r for r in fits if r["silhouette"] >= silhouette_floor]
    if good:
        return good[-1]["D"], False
    best = max(fits, key=lambda r: (r["silhouette"], r["D"]))
    return best["D"], True


def score_ensemble(V, D, P_raw, solver_config=None, elimination=None, master_seed=0, workers=1):
    """Build, prune and cluster one ensemble; returns ``(row, ensemble)``.

    ``row["retained"]`` is 0 and the scores are NaN when every run was eliminated.
    """
    raw = run_ensemble(V, D, P_raw, solver_config, master_seed=master_seed, workers=workers)
    try:
        ens = eliminate(raw, elimination)
    except SelectionDegenerateError as exc:
        logger.warning("%s", exc)
        return {"D": D, "silhouette": float("nan"), "avg_R": float("nan"), "retained": 0,
                "raw": raw.n_raw, "attempts": raw.n_attempts}, None
    if ens.retained >= 2:
        ens = cluster_equal_size(ens)
        ens.avg_silhouette = avg_silhouette(ens)
    else:
        ens.assignments = np.arange(D)[None, :]
        ens.centroids = ens.solutions[0].H.copy()
        ens.avg_silhouette = 1.0 if D == 1 else 0.0
    row = {"D": D, "silhouette": ens.avg_silhouette, "avg_R": ens.avg_R, "retained": ens.retained,
           "raw": ens.n_raw, "attempts": ens.n_attempts, "outliers": ens.n_outliers,
           "unphysical": ens.n_unphysical, "criterion": ens.criterion,
           "cluster_converged": ens.cluster_converged}
    return row, ens


def select_K(V, D_range, P_raw, solver_config=None, elimination=None, silhouette_floor=0.9,
             r_slack=0.05, master_seed=0, workers=1):
    V = check_observation(V)
    N = V.shape[0]
    D_range = sorted(set(int(d) for d in D_range))
    if not D_range or D_range[0] < 1 or D_range[-1] > N - 1:
        raise InvalidArgumentError(f"candidate source counts must lie in [1, {N - 1}], got {D_range}")
    table, ensembles = [], {}
    for k, D in enumerate(D_range):
        # each D gets its own seed stream so adding candidates never perturbs the others
        seed = np.random.SeedSequence([0 if master_seed is None else master_seed, D])
        row, ens = score_ensemble(V, D, P_raw, solver_config, elimination,
                                  master_seed=seed, workers=workers)
        logger.info("D=%d silhouette=%.4f avg_R=%.4g retained=%d", D, row["silhouette"], row["avg_R"],
                    row["retained"])
        table.append(row)
        if ens is not None:
            ensembles[D] = ens
    K, compromise = choose_K(table, silhouette_floor, r_slack)
    H, W, tau = ensembles[K].centroid_triple()
    return SelectionReport(table=table, selected_K=K, compromise=compromise, H=H, W=W, tau=tau,
                           ensembles=ensembles)


class ShiftNMFk(BaseEstimator):
    """Shifted NMF with automatic choice of the number of sources.

    Parameters mirror the selection pipeline; ``n_runs`` is the ensemble size
    per candidate. After ``fit``: ``n_sources_``, ``components_`` (waveform
    centroids), ``mixing_``, ``delays_`` and ``report_``.
    """

    def __init__(self, d_range=(1, 2, 3, 4), n_runs=100, max_iter=500, tol=1e-8, outlier_fraction=0.10,
                 cv_cutoff=0.8, silhouette_floor=0.9, r_slack=0.05, random_state=0, n_jobs=1):
        self.d_range = d_range
        self.n_runs = n_runs
        self.max_iter = max_iter
        self.tol = tol
        self.outlier_fraction = outlier_fraction
        self.cv_cutoff = cv_cutoff
        self.silhouette_floor = silhouette_floor
        self.r_slack = r_slack
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, V, y=None, sensor_array=None, speed_hint=None):
        V = check_observation(V)
        elim = EliminationConfig(self.outlier_fraction, self.cv_cutoff, speed_hint, sensor_array)
        solver = SolverConfig(max_iterations=self.max_iter, convergence_tol=self.tol)
        d_range = [d for d in self.d_range if d < V.shape[0]]
        self.report_ = select_K(V, d_range, self.n_runs, solver, elim, self.silhouette_floor, self.r_slack,
                                master_seed=self.random_state, workers=self.n_jobs)
        self.n_sources_ = self.report_.selected_K
        self.components_ = self.report_.H
        self.mixing_ = self.report_.W
        self.delays_ = self.report_.tau
        return self
