"""Command-line entry point: ``shiftsep {synth,select,locate,uncertainty,pipeline,report}``.

Exit codes: 0 success, 1 unexpected error, 2 I/O or input-format error,
3 model selection degenerate, 4 localization failed.
"""

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .exceptions import (
    ConstructionFailedError,
    DegenerateInputError,
    EnsembleUnderfilledError,
    InvalidArgumentError,
    LocalizationFailedError,
    SchemaError,
    SelectionDegenerateError,
)
from .localization import DelayStatistics, LocateConfig, build_delay_stats, locate
from .presets import PRESETS, make_preset
from .selection import EliminationConfig, default_workers, select_K
from .signal_model import cosine_distance_matrix
from .solver import SolverConfig, center_delays
from .uncertainty import McmcConfig, parameter_names, posterior

logger = logging.getLogger("shiftsep")

EXIT_OK, EXIT_ERROR, EXIT_IO, EXIT_DEGENERATE, EXIT_LOCALIZATION = 0, 1, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "workers": None,
    "synth": {"preset": None, "similarity": 0.0, "noise_sigma": 0.0},
    "solver": {"max_iterations": 50_000, "convergence_tol": 1e-8, "convergence_window": 100,
               "tau_update_period": 1, "tau_damping": 1.0},
    "selection": {"d_min": 1, "d_max": None, "P_raw": 100, "silhouette_floor": 0.9, "r_slack": 0.05,
                  "outlier_fraction": 0.10, "cv_cutoff": 0.8, "criterion": "auto", "speed_hint": None},
    "localization": {"n_starts": 1000, "coord_bounds": None, "speed_bounds": [1e-3, 10.0]},
    "mcmc": {"chain_length": 100_000, "burn_in": 10_000, "target_acceptance": 0.234,
             "adaptation_decay": 0.66},
}

_STAGES = {"synth": 0, "selection": 1, "localization": 2, "mcmc": 3}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# -- configuration -------------------------------------------------------------

def _merge(base, override, path=""):
    for key, value in override.items():
        if key not in base:
            raise InvalidArgumentError(f"unknown configuration key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise InvalidArgumentError(f"configuration key {path + key!r} must be a mapping")
            _merge(base[key], value, path + key + ".")
        else:
            base[key] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args):
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        _merge(cfg, io.read_json(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise InvalidArgumentError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        node = {}
        cur = node
        parts = key.strip().split(".")
        for p in parts[:-1]:
            cur[p] = {}
            cur = cur[p]
        cur[parts[-1]] = _parse_value(value)
        _merge(cfg, node)
    if args.seed is not None:
        cfg["seed"] = args.seed
    # precedence: --workers, then SHIFTSEP_WORKERS, then the config file, then all cores
    if os.environ.get("SHIFTSEP_WORKERS"):
        cfg["workers"] = default_workers()
    if args.workers is not None:
        cfg["workers"] = args.workers
    if getattr(args, "preset", None):
        cfg["synth"]["preset"] = args.preset
    if getattr(args, "similarity", None) is not None:
        cfg["synth"]["similarity"] = args.similarity
    if cfg["workers"] is None:
        cfg["workers"] = default_workers()
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise InvalidArgumentError(f"workers must be a positive integer, got {cfg['workers']!r}")
    return cfg


def _result_config(cfg):
    # the worker count never changes results, so it stays out of provenance
    return {k: v for k, v in cfg.items() if k != "workers"}


def config_hash(cfg):
    blob = json.dumps(_result_config(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def stage_seed(cfg, stage):
    return int(np.random.SeedSequence([int(cfg["seed"]), _STAGES[stage]]).generate_state(1)[0])


def _provenance(cfg):
    return {"config_hash": config_hash(cfg), "seed": cfg["seed"], "config": _result_config(cfg)}


# -- file helpers --------------------------------------------------------------

def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"cannot write to output directory {out}: {exc.strerror or exc}", EXIT_IO) from None
    return out


def _require(path, what):
    if not Path(path).exists():
        raise CliError(f"missing {what}: {path}", EXIT_IO)
    return Path(path)


def _load_sensors(directory):
    path = Path(directory) / "sensors.csv"
    return io.read_sensors(path) if path.exists() else None


def _load_truth(directory):
    path = Path(directory) / "truth.json"
    if not path.exists():
        return None
    truth = io.read_json(path)
    for key in ("H", "W", "tau"):
        truth[key] = io.read_matrix(Path(directory) / truth["files"][key])
    return truth


# -- commands ------------------------------------------------------------------

def cmd_synth(cfg, out):
    preset = cfg["synth"]["preset"]
    if not preset:
        raise InvalidArgumentError(f"synth needs --preset (one of {', '.join(PRESETS)})")
    ds = make_preset(preset, seed=cfg["seed"], similarity=cfg["synth"]["similarity"],
                     noise_sigma=cfg["synth"]["noise_sigma"])
    out = _out_dir(out)
    io.write_matrix(out / "V.csv", ds.V)
    io.write_sensors(out / "sensors.csv", ds.array)
    files = {"H": "H_true.csv", "W": "W_true.csv", "tau": "tau_true.csv"}
    for key, name in files.items():
        io.write_matrix(out / name, ds.truth[key])
    meta = {"preset": preset, "seed": cfg["seed"], "kind": ds.truth["kind"], "files": files,
            "noise_sigma": ds.noise_sigma, "sample_interval": ds.sample_interval}
    for key in ("sources", "speed", "decay_law", "amplitudes", "similarity"):
        if key in ds.truth:
            meta[key] = ds.truth[key]
    io.write_json(out / "truth.json", meta)
    logger.info("wrote %s dataset to %s", preset, out)
    return EXIT_OK


def _elimination(cfg, sensors):
    sel = cfg["selection"]
    criterion = sel["criterion"]
    speed = sel["speed_hint"]
    if criterion not in ("auto", "cv", "tmax"):
        raise InvalidArgumentError("selection.criterion must be auto, cv or tmax")
    use_tmax = criterion != "cv" and sensors is not None and speed is not None
    if criterion == "tmax" and not use_tmax:
        logger.warning("travel-time criterion needs sensors.csv and selection.speed_hint; "
                       "falling back to the CV approximation")
    return EliminationConfig(outlier_fraction=sel["outlier_fraction"], cv_cutoff=sel["cv_cutoff"],
                             speed_hint=speed if use_tmax else None,
                             sensor_array=sensors if use_tmax else None)


def _delays_bar(out, ens, truth):
    """Estimated versus true delays with clusters matched to true waveforms."""
    Ht, Wt, tt = center_delays(np.asarray(truth["H"]), np.asarray(truth["W"]), np.asarray(truth["tau"]))
    if Ht.shape[0] != ens.D or Ht.shape[1] != ens.centroids.shape[1]:
        return
    from scipy.optimize import linear_sum_assignment

    _, _, tau = ens.centroid_triple()
    rows, cols = linear_sum_assignment(cosine_distance_matrix(ens.centroids, Ht))
    table = []
    for c, t in zip(rows, cols):
        for n in range(tau.shape[0]):
            table.append([n, int(c), int(t), float(tau[n, c]), float(tt[n, t])])
    io.write_table(out / "delays_bar.csv", ["sensor", "source", "true_source", "tau_est", "tau_true"], table)


def cmd_select(cfg, data_dir, out):
    data_dir = Path(data_dir)
    V = io.read_matrix(_require(data_dir / "V.csv", "observation matrix"))
    sensors = _load_sensors(data_dir)
    if sensors is not None and len(sensors) != V.shape[0]:
        raise SchemaError(data_dir / "sensors.csv", f"{len(sensors)} sensors listed but V has {V.shape[0]} rows")
    out = _out_dir(out)
    sel = cfg["selection"]
    d_max = sel["d_max"] if sel["d_max"] is not None else min(V.shape[0] - 1, 5)
    solver = SolverConfig(**cfg["solver"])
    report = select_K(V, range(sel["d_min"], d_max + 1), sel["P_raw"], solver, _elimination(cfg, sensors),
                      silhouette_floor=sel["silhouette_floor"], r_slack=sel["r_slack"],
                      master_seed=stage_seed(cfg, "selection"), workers=cfg["workers"])
    K = report.selected_K
    ens = report.ensembles[K]
    io.write_matrix(out / "H_K.csv", report.H)
    io.write_matrix(out / "W_K.csv", report.W)
    io.write_matrix(out / "tau_K.csv", report.tau)
    io.write_table(out / "selection_curve.csv", ["D", "silhouette", "avg_R"],
                   [[r["D"], float(r["silhouette"]), float(r["avg_R"])] for r in report.table])
    files = {"H": "H_K.csv", "W": "W_K.csv", "tau": "tau_K.csv"}
    if ens.retained >= 2:
        stats = build_delay_stats(ens)
        io.write_matrix(out / "tau_mean.csv", stats.mean_tau)
        io.write_matrix(out / "tau_sigma.csv", stats.sigma_tau)
        files.update(tau_mean="tau_mean.csv", tau_sigma="tau_sigma.csv")
    truth = _load_truth(data_dir)
    if truth is not None:
        _delays_bar(out, ens, truth)
    doc = {**report.to_dict(), "files": files, "n_sensors": V.shape[0], "n_samples": V.shape[1],
           **_provenance(cfg)}
    io.write_json(out / "selection.json", doc)
    if report.compromise:
        logger.warning("no candidate met the silhouette floor; K=%d is a best compromise", K)
    logger.info("selected K=%d", K)
    return EXIT_OK


def _load_stats(sel_dir):
    sel_dir = Path(sel_dir)
    mean = io.read_matrix(_require(sel_dir / "tau_mean.csv", "delay means (run select first)"))
    sigma = io.read_matrix(_require(sel_dir / "tau_sigma.csv", "delay deviations (run select first)"))
    return DelayStatistics(mean, sigma)


def _locate_config(cfg):
    loc = cfg["localization"]
    return LocateConfig(n_starts=loc["n_starts"], coord_bounds=loc["coord_bounds"],
                        speed_bounds=tuple(loc["speed_bounds"]), seed=stage_seed(cfg, "localization"))


def cmd_locate(cfg, data_dir, out):
    sensors = _load_sensors(data_dir)
    if sensors is None:
        raise CliError(f"missing sensor geometry: {Path(data_dir) / 'sensors.csv'}", EXIT_IO)
    out = _out_dir(out)
    stats = _load_stats(out)
    result = locate(stats, sensors, _locate_config(cfg), workers=cfg["workers"])
    rows = []
    for j, cloud in enumerate(result.cloud):
        rows.extend([j + 1, float(x), float(y)] for x, y in cloud)
    io.write_table(out / "cloud.csv", ["source", "x", "y"], rows)
    io.write_json(out / "localization.json", {**result.to_dict(), "files": {"cloud": "cloud.csv"},
                                              **_provenance(cfg)})
    logger.info("located %d sources, speed %.4g", len(result.sources), result.speed)
    return EXIT_OK


def cmd_uncertainty(cfg, data_dir, out):
    sensors = _load_sensors(data_dir)
    if sensors is None:
        raise CliError(f"missing sensor geometry: {Path(data_dir) / 'sensors.csv'}", EXIT_IO)
    out = Path(out)
    stats = _load_stats(out)
    loc = io.read_json(_require(out / "localization.json", "localization result (run locate first)"))
    start = np.array([c for s in loc["sources"] for c in (s["x"], s["y"])] + [loc["speed"]])
    mc = cfg["mcmc"]
    mcmc = McmcConfig(chain_length=mc["chain_length"], burn_in=mc["burn_in"],
                      target_acceptance=mc["target_acceptance"], adaptation_decay=mc["adaptation_decay"],
                      seed=stage_seed(cfg, "mcmc"))
    lcfg = cfg["localization"]
    chain, summary = posterior(stats, sensors, start, mcmc, coord_bounds=lcfg["coord_bounds"],
                               speed_bounds=tuple(lcfg["speed_bounds"]))
    names = parameter_names(stats.n_sources)
    io.write_table(out / "posterior.csv", names, chain.samples[mcmc.burn_in:].tolist())
    io.write_json(out / "posterior_summary.json", {**summary.to_dict(), "files": {"chain": "posterior.csv"},
                                                   **_provenance(cfg)})
    logger.info("posterior acceptance rate %.3f", summary.acceptance_rate)
    return EXIT_OK


def cmd_report(cfg, data_dir, out):
    out = Path(out)
    sel = io.read_json(_require(out / "selection.json", "selection report"))
    doc = {"selected_K": sel["selected_K"], "selection": sel["table"], "compromise": sel["compromise"]}
    truth = _load_truth(data_dir) if data_dir else None
    if (out / "selection.json").exists() and truth is not None:
        H = io.read_matrix(out / sel["files"]["H"])
        Ht, _, _ = center_delays(truth["H"], truth["W"], truth["tau"])
        if H.shape == Ht.shape:
            from scipy.optimize import linear_sum_assignment

            d = cosine_distance_matrix(H, Ht)
            r, c = linear_sum_assignment(d)
            doc["waveform_distance"] = [float(x) for x in d[r, c]]
    if (out / "localization.json").exists():
        loc = io.read_json(out / "localization.json")
        doc["localization"] = {"sources": loc["sources"], "speed": loc["speed"], "objective": loc["objective"]}
        if truth is not None and "sources" in truth:
            doc["true_sources"] = truth["sources"]
            doc["true_speed"] = truth["speed"]
    if (out / "posterior_summary.json").exists():
        post = io.read_json(out / "posterior_summary.json")
        doc["posterior"] = {k: {"mean": v["mean"], "two_sigma": v["two_sigma"]}
                            for k, v in post["parameters"].items()}
        doc["posterior_acceptance_rate"] = post["acceptance_rate"]
    io.write_json(out / "report.json", {**doc, **_provenance(cfg)})
    return EXIT_OK


def cmd_pipeline(cfg, data_dir, out):
    out = Path(out)
    if cfg["synth"]["preset"]:
        cmd_synth(cfg, out)
        data_dir = out
    if data_dir is None:
        raise InvalidArgumentError("pipeline needs --preset or --input")
    cmd_select(cfg, data_dir, out)
    if _load_sensors(data_dir) is None:
        logger.warning("no sensors.csv; skipping localization and uncertainty")
    else:
        if not (out / "tau_mean.csv").exists():
            raise LocalizationFailedError("too few retained solutions for delay statistics")
        cmd_locate(cfg, data_dir, out)
        cmd_uncertainty(cfg, data_dir, out)
    return cmd_report(cfg, data_dir, out)


# -- argument parsing ----------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="master seed (all sub-seeds derive from it)")
    common.add_argument("--workers", type=int, help="worker processes (default: $SHIFTSEP_WORKERS or all cores)")
    common.add_argument("--preset", choices=PRESETS, help="synthetic dataset to generate")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory")
    common.add_argument("--input", metavar="DIR", help="directory with V.csv and optional sensors.csv")
    common.add_argument("--set", metavar="KEY=VALUE", action="append",
                        help="override a dotted config path, e.g. solver.max_iterations=500")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="shiftsep", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    synth = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    synth.add_argument("--similarity", type=float, help="pair similarity for the fig1 preset")
    for name, text in [("select", "choose the number of sources"),
                       ("locate", "estimate source positions and speed"),
                       ("uncertainty", "sample the posterior of positions and speed"),
                       ("report", "summarize results in report.json")]:
        sub.add_parser(name, parents=[common], help=text)
    pipe = sub.add_parser("pipeline", parents=[common], help="synth (optional), select, locate, uncertainty, report")
    pipe.add_argument("--similarity", type=float, help="pair similarity for the fig1 preset")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = resolve_config(args)
        data_dir = args.input if args.input else args.out
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if args.command == "select":
            return cmd_select(cfg, data_dir, args.out)
        if args.command == "locate":
            return cmd_locate(cfg, data_dir, args.out)
        if args.command == "uncertainty":
            return cmd_uncertainty(cfg, data_dir, args.out)
        if args.command == "report":
            return cmd_report(cfg, data_dir, args.out)
        return cmd_pipeline(cfg, args.input, args.out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SchemaError, FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SelectionDegenerateError, EnsembleUnderfilledError) as exc:
        print(f"error: model selection failed: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except LocalizationFailedError as exc:
        print(f"error: localization failed: {exc}", file=sys.stderr)
        return EXIT_LOCALIZATION
    except (InvalidArgumentError, DegenerateInputError, ConstructionFailedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostics for the shell
        logger.debug("unexpected failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
