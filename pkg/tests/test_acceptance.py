"""End-to-end acceptance criteria 1-8.

Each test records its verdict in ``conftest.ACCEPTANCE`` and prints one line,
so the terminal summary lists every criterion even when some fail. Solver
budgets are reduced from the library defaults (500 iterations per run) to keep
the suite within tens of minutes on a single core.
"""

import itertools
import json

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from conftest import ACCEPTANCE
from shiftsep import cli
from shiftsep.localization import DelayStatistics, LocateConfig, build_delay_stats, locate, objective_F
from shiftsep.presets import INSIDE_SOURCES, OUTSIDE_SOURCES, make_preset
from shiftsep.selection import (
    RunEnsemble,
    default_workers,
    match_to_centroids,
    score_ensemble,
    select_K,
    silhouette_values,
)
from shiftsep.signal_model import SensorArray, SolutionTuple, apply_delay, parseval_cost
from shiftsep.solver import SolverConfig, center_delays, solve, update_H, update_tau, update_W
from shiftsep.uncertainty import McmcConfig, posterior, ram_sample

pytestmark = pytest.mark.slow

BUDGET = SolverConfig(max_iterations=500)
WORKERS = default_workers()


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def cos_dist(a, b):
    return 1.0 - float(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)))


def matched_distances(H, H_true):
    d = np.array([[cos_dist(a, b) for b in H_true] for a in H])
    r, c = linear_sum_assignment(d)
    return d[r, c]


@pytest.fixture(scope="module")
def three_source():
    ds = make_preset("random-3x18")
    return ds, select_K(ds.V, range(1, 5), 100, BUDGET, master_seed=0, workers=WORKERS)


@pytest.fixture(scope="module")
def four_source():
    ds = make_preset("random-4x24")
    return ds, select_K(ds.V, range(1, 6), 100, BUDGET, master_seed=0, workers=WORKERS)


def _curve(report):
    return {row["D"]: round(float(row["silhouette"]), 3) for row in report.table}


def test_criterion_1_model_order_three_sources(three_source):
    _, rep = three_source
    s = {row["D"]: row["silhouette"] for row in rep.table}
    ok = rep.selected_K == 3 and all(s[d] >= 0.9 for d in (1, 2, 3)) and s[3] - s[4] >= 0.1
    record(1, ok, f"K={rep.selected_K} silhouette={_curve(rep)}")


def test_criterion_2_model_order_four_sources(four_source):
    _, rep = four_source
    record(2, rep.selected_K == 4, f"K={rep.selected_K} silhouette={_curve(rep)}")


def test_criterion_3_waveform_recovery(three_source, four_source):
    worst, ok = [], True
    for ds, rep in (three_source, four_source):
        K = ds.truth["H"].shape[0]
        if K not in rep.ensembles:
            ok = False
            worst.append(float("nan"))
            continue
        H_true, _, _ = center_delays(ds.truth["H"], ds.truth["W"], ds.truth["tau"])
        d = matched_distances(rep.ensembles[K].centroids, H_true)
        worst.append(round(float(d.max()), 4))
        ok &= bool(np.all(d <= 0.05))
    record(3, ok, f"worst centroid cosine distance (3-source, 4-source) = {worst}")


LEVELS = (0.1, 0.3, 0.5, 0.7, 0.9)


def _shift_free_distance(a, b):
    # best circular alignment, by brute force over all integer lags
    return min(cos_dist(a, np.roll(b, s)) for s in range(len(b)))


def test_criterion_4_correlation_study():
    rates = {}
    for level in LEVELS:
        hits = 0
        for seed in range(100):
            ds = make_preset("fig1", seed=seed, similarity=level)
            sol = solve(ds.V, 3, SolverConfig(max_iterations=500, seed=seed))
            d = np.array([[_shift_free_distance(a, b) for b in ds.truth["H"]] for a in sol.H])
            r, c = linear_sum_assignment(d)
            hits += bool(np.all(d[r, c] <= 0.05))
        rates[level] = hits / 100
    seq = [rates[x] for x in LEVELS]
    monotone = all(later <= earlier + 0.10 for i, earlier in enumerate(seq) for later in seq[i + 1:])
    low = all(rates[x] > 0.70 for x in LEVELS if x <= 0.3)
    high = all(rates[x] < 0.40 for x in LEVELS if x >= 0.7)
    record(4, monotone and low and high, f"success rate by similarity {rates}")


@pytest.fixture(scope="module")
def physical():
    out = {}
    for name, truth in (("inside-3x16", INSIDE_SOURCES), ("outside-3x16", OUTSIDE_SOURCES)):
        ds = make_preset(name)
        _, ens = score_ensemble(ds.V, 3, 30, BUDGET, master_seed=0, workers=WORKERS)
        stats = build_delay_stats(ens)
        res = locate(stats, ds.array, LocateConfig(n_starts=200, seed=0), workers=WORKERS)
        _, summary = posterior(stats, ds.array, res, McmcConfig(seed=0))
        out[name] = (np.array(truth), res, summary)
    return out


def _pair(found, truth):
    d = np.linalg.norm(found[:, None, :] - truth[None, :, :], axis=-1)
    r, c = linear_sum_assignment(d)
    return r[np.argsort(c)]  # found index for each true source


def test_criterion_5_localization(physical):
    ok, parts = True, []
    for name, (truth, res, _) in physical.items():
        found = res.sources[_pair(res.sources, truth)]
        err = np.abs(found - truth).max()
        ok &= bool(err <= 0.15) and 0.49 <= res.speed <= 0.51
        parts.append(f"{name}: max coord error {err:.2e}, speed {res.speed:.5f}")
    record(5, ok, "; ".join(parts))


def test_criterion_6_posterior(physical):
    contained, widest = 0, 0.0
    for truth, res, summary in physical.values():
        idx = _pair(res.sources, truth)
        for true_xy, j in zip(truth, idx):
            mean = summary.mean[2 * j:2 * j + 2]
            half = summary.two_sigma[2 * j:2 * j + 2]
            contained += bool(np.all(np.abs(mean - true_xy) <= half))
            widest = max(widest, float(half.max()))
    # loosest tabulated half-width is about 0.07; one order of magnitude either way
    ok = contained >= 5 and 0.007 <= widest <= 0.7
    record(6, ok, f"{contained}/6 sources inside 2-sigma; widest 2-sigma half-width {widest:.2e}")


def _oracle_checks():
    rng = np.random.default_rng(2024)
    out = {}

    err = 0.0
    for _ in range(200):
        M = int(rng.integers(2, 64))
        s, k = rng.random(M), int(rng.integers(-M, M))
        err = max(err, np.abs(apply_delay(s, k) - np.roll(s, k)).max())
    out["dft shift = rotation"] = err <= 1e-9

    worst = 0.0
    for _ in range(200):
        N, K, M = 3, 2, int(rng.integers(4, 40))
        W, H, V = rng.random((N, K)), rng.random((K, M)), rng.random((N, M))
        tau = rng.integers(-5, 6, (N, K)).astype(float)
        direct = V - sum(W[:, [k]] * np.array([np.roll(H[k], int(t)) for t in tau[:, k]]) for k in range(K))
        expect = 0.5 * np.sum(direct ** 2)
        worst = max(worst, abs(parseval_cost(V, (W, H, tau)) - expect) / expect)
    out["parseval identity"] = worst <= 1e-6

    descent = True
    for _ in range(1000):
        N, K, M = int(rng.integers(3, 6)), int(rng.integers(1, 3)), int(rng.integers(6, 20))
        sol = SolutionTuple(H=rng.random((K, M)), W=rng.random((N, K)) + 0.1, tau=rng.uniform(-3, 3, (N, K)))
        V = rng.random((N, M))
        for update in (update_H, update_W, update_tau):
            new = update(V, sol)
            descent &= parseval_cost(V, new) <= parseval_cost(V, sol) + 1e-10
    out["monotone descent x1000"] = bool(descent)

    exact = True
    for D in range(1, 6):
        for _ in range(10):
            H, C = rng.random((D, 8)), rng.random((D, 8))
            _, cost = match_to_centroids(H, C)
            brute = min(sum(cos_dist(H[i], C[p[i]]) for i in range(D)) for p in itertools.permutations(range(D)))
            exact &= abs(cost - brute) <= 1e-12
    out["clustering = brute force"] = bool(exact)

    sols = [SolutionTuple(H=rng.random((2, 6)), W=np.ones((4, 2)), tau=np.zeros((4, 2))) for _ in range(10)]
    labels = np.array([rng.permutation(2) for _ in range(10)])
    X = np.concatenate([s.H for s in sols])
    lab = labels.ravel()
    expect = []
    for i in range(len(X)):
        same = [cos_dist(X[i], X[j]) for j in range(len(X)) if lab[j] == lab[i] and j != i]
        other = [cos_dist(X[i], X[j]) for j in range(len(X)) if lab[j] != lab[i]]
        a, b = np.mean(same), np.mean(other)
        expect.append((b - a) / max(a, b))
    got = silhouette_values(RunEnsemble(D=2, solutions=sols, assignments=labels))
    out["silhouette = textbook"] = bool(np.abs(got - expect).max() <= 1e-12)

    arr = SensorArray(rng.uniform(0, 5, (8, 2)))
    src, v = rng.uniform(-2, 7, (2, 2)), 0.7
    mean = np.array([np.hypot(*(arr.coordinates - s).T) / v for s in src]) + rng.normal(0, 0.1, (2, 8))
    stats = DelayStatistics(mean, np.full((2, 8), 0.1))
    p = np.append(rng.uniform(0, 5, 4), 0.6)
    base = objective_F(p, stats, arr)
    offset = DelayStatistics(mean + np.array([[3.0], [-7.0]]), stats.sigma_tau)
    moved = SensorArray(arr.coordinates + [4.0, -2.0])
    p_moved = np.append(p[:4] + np.tile([4.0, -2.0], 2), p[4])
    scaled = SensorArray(arr.coordinates * 2.5)
    inv = [objective_F(p, offset, arr), objective_F(p_moved, stats, moved), objective_F(p * 2.5, stats, scaled)]
    out["objective invariances"] = bool(np.allclose(inv, base, rtol=1e-9))

    chain = ram_sample(lambda x: -0.5 * float(x @ x), np.zeros(2),
                       McmcConfig(chain_length=100_000, burn_in=10_000, seed=4))
    post = chain.samples[10_000:]
    out["RAM gaussian moments"] = bool(np.all(np.abs(post.mean(0)) <= 0.05)
                                       and np.all(np.abs(post.std(0) - 1) <= 0.05)
                                       and abs(chain.acceptance_rate - 0.234) <= 0.05)
    return out


def test_criterion_7_oracle_suites():
    checks = _oracle_checks()
    failed = [k for k, v in checks.items() if not v]
    record(7, not failed, f"{len(checks) - len(failed)}/{len(checks)} oracle checks" +
           (f"; failed: {failed}" if failed else ""))


def test_criterion_8_determinism(tmp_path):
    config = tmp_path / "small.json"
    config.write_text(json.dumps({
        "solver": {"max_iterations": 150}, "selection": {"P_raw": 10, "d_min": 2, "d_max": 3},
        "localization": {"n_starts": 20}, "mcmc": {"chain_length": 3000, "burn_in": 300}}))
    runs = []
    for name, workers in (("a", 1), ("b", 2)):
        out = tmp_path / name
        code = cli.main(["pipeline", "--preset", "inside-3x16", "--seed", "11", "--workers", str(workers),
                         "--config", str(config), "--out", str(out)])
        assert code == 0
        runs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    a, b = runs
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = set(a) == set(b) and not differing and len(a) >= 15
    record(8, ok, f"{len(a)} files compared across reruns (workers 1 vs 2); differing: {differing or 'none'}")
