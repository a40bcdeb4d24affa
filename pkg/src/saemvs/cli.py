"""``saemvs`` command-line interface.

Subcommands: ``select`` (full grid procedure), ``map`` (one spike variance),
``simulate`` (one method on a synthetic design), ``benchmark`` (several
methods, optionally several dropout fractions) and ``threshold-path`` (tidy
regularization path from a finished ``select`` or ``map`` directory).

Expected failures print one JSON object on stderr and exit with a code that
identifies the error class (see :data:`EXIT_CODES`).
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import replace
from importlib import metadata, resources
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import io
from .config import (RunConfig, from_document, load_toml, normalize_method, resolve_settings,
                     scenario_from, settings_document)
from .baselines import TwoStepResult, two_step_select
from .errors import (AllPointsFailed, ConfigError, IoError, MissingArtifacts, SaemvsError)
from .saem import run_map
from .selection import SelectionResult, run_saemvs, select_support, threshold
from .simulation import MetricsReport, run_campaign

EXIT_CODES = {ConfigError: 2, IoError: 3, AllPointsFailed: 4, MissingArtifacts: 5}
TOY_CONFIG = "toy.toml"


def exit_code(exc: BaseException) -> int:
    for cls, code in EXIT_CODES.items():
        if isinstance(exc, cls):
            return code
    return 1


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "unknown"


def toy_config_path() -> Path:
    return Path(str(resources.files("saemvs") / "data" / TOY_CONFIG))


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML configuration file")
    common.add_argument("--seed", type=int, help="base seed (default 0)")
    common.add_argument("--threads", type=int, help="worker processes (default: all cores)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--grid-log10", nargs=3, metavar=("LO", "HI", "COUNT"),
                        help="nu0 grid 10**(LO + k (HI - LO) / (COUNT - 1))")
    common.add_argument("--model", help="structural model name")
    common.add_argument("--method", help="saemvs, two-step-gaussian or two-step-mgaussian")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--observations", type=Path, help="long CSV with id,time,y")
    data.add_argument("--covariates", type=Path, help="wide CSV with id and one column per covariate")
    data.add_argument("--toy", action="store_true", help="use the bundled toy dataset and config")

    parser = argparse.ArgumentParser(prog="saemvs", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    sub.add_parser("select", parents=[common, data], help="grid procedure with eBIC choice")
    m = sub.add_parser("map", parents=[common, data], help="MAP estimate at one nu0")
    m.add_argument("--nu0", type=float, help="spike variance")
    sub.add_parser("simulate", parents=[common], help="replicate campaign for one method")
    sub.add_parser("benchmark", parents=[common], help="campaigns for several methods")
    t = sub.add_parser("threshold-path", parents=[common], help="tidy thresholded path")
    t.add_argument("run_dir", nargs="?", type=Path, help="finished select or map directory")
    return parser


def build_config(args: argparse.Namespace) -> RunConfig:
    config_path = args.config
    if getattr(args, "toy", False):
        if config_path is not None:
            raise ConfigError("--toy and --config are mutually exclusive")
        config_path = toy_config_path()
    if config_path is not None:
        cfg = from_document(load_toml(config_path), args.subcommand, Path(config_path).parent)
    else:
        cfg = RunConfig(args.subcommand)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg.workers = args.threads
    if args.out is not None:
        cfg.out = args.out
    if args.grid_log10 is not None:
        lo, hi, count = args.grid_log10
        try:
            cfg.grid_log10 = (float(lo), float(hi), int(count))
        except ValueError:
            raise ConfigError("--grid-log10 expects two floats and an integer") from None
        cfg.grid_values = None
    if args.model is not None:
        cfg.model = args.model
    if args.method is not None:
        cfg.method = args.method
    cfg.method = normalize_method(cfg.method)
    cfg.methods = tuple(normalize_method(m) for m in cfg.methods)
    for name in ("observations", "covariates"):
        if getattr(args, name, None) is not None:
            setattr(cfg, name, getattr(args, name))
    if getattr(args, "nu0", None) is not None:
        cfg.nu0 = args.nu0
    if getattr(args, "run_dir", None) is not None:
        cfg.run_dir = args.run_dir
    return cfg


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------


def _load_data(cfg: RunConfig):
    if cfg.observations is None or cfg.covariates is None:
        raise ConfigError("both an observations and a covariates file are required")
    obs_path = io.require_file(cfg.observations, "observations")
    cov_path = io.require_file(cfg.covariates, "covariates")
    obs = io.read_observations(obs_path)
    design = io.read_covariates(cov_path, obs.ids, cfg.forced)
    inputs = {"observations": {"path": str(obs_path), "sha256": io.sha256(obs_path)},
              "covariates": {"path": str(cov_path), "sha256": io.sha256(cov_path)}}
    return obs, design, inputs


def _manifest(cfg: RunConfig, argv: Sequence[str], started: float, **extra) -> dict:
    out = {"program": "saemvs", "version": _version(), "subcommand": cfg.subcommand,
           "argv": list(argv), "config": cfg.to_dict(), "python": platform.python_version(),
           "numpy": np.__version__,
           "timing": {"wall_seconds": round(time.perf_counter() - started, 3)}}
    out.update(extra)
    return out


def _path_rows(g: int, nu0: float, beta: np.ndarray, design, model):
    for m in range(model.q):
        if not model.selection_mask[m]:
            continue
        for l in range(design.p):
            yield g, nu0, design.names[l], model.phi_names[m], beta[l, m]


PATH_HEADER = ("nu0_index", "nu0", "covariate", "component", "beta")


def _criteria_header(model) -> List[str]:
    return (["nu0_index", "nu0", "status", "support_id", "support_size", "support", "loglik",
             "ebic", "chosen"] + [f"alpha_{c}" for c in model.phi_names]
            + [f"threshold_{c}" for c in model.phi_names] + ["error"])


def _support_list(support, design, model):
    return [{"covariate": design.names[l], "component": model.phi_names[m]}
            for l, m in support.sorted()]


def write_selection(out: Path, result: SelectionResult, design, model) -> None:
    """``path.csv``, ``criteria.csv`` and ``result.json`` for a grid run."""
    grid = result.grid.nu0_values
    rows = []
    for g, th in enumerate(result.map_estimates):
        if th is not None:
            rows.extend(_path_rows(g, grid[g], th.beta, design, model))
    io.write_csv(out / "path.csv", PATH_HEADER, rows)

    crit = []
    for g, nu0 in enumerate(grid):
        th = result.map_estimates[g]
        if th is None:
            crit.append([g, nu0, "failed", None, None, None, None, None, False]
                        + [None] * (2 * model.q) + [result.failures.get(g)])
            continue
        j = result.support_id[g]
        fit = result.fits[j]
        sup = result.supports[g]
        crit.append([g, nu0, "ok" if fit.error is None else "refit_failed", j, len(sup),
                     sup.label(design.names, model.phi_names), fit.loglik, fit.ebic,
                     g == result.nu0_hat_index] + list(th.alpha) + list(result.thresholds[g])
                    + [fit.error])
    io.write_csv(out / "criteria.csv", _criteria_header(model), crit)

    final = result.final_fit
    io.write_json(out / "result.json", {
        "kind": "select", "seed": result.seed, "nu1": result.nu1, "grid": list(grid),
        "nu0_hat": result.nu0_hat, "nu0_hat_index": result.nu0_hat_index,
        "support": _support_list(result.final_support, design, model),
        "support_label": result.final_support.label(design.names, model.phi_names),
        "loglik": final.loglik, "ebic": final.ebic,
        "theta_mle": None if final.theta_mle is None else final.theta_mle.to_dict(),
        "theta_map": result.map_estimates[result.nu0_hat_index].to_dict(),
        "covariates": list(design.names), "components": list(model.phi_names),
        "selection_mask": list(model.selection_mask),
        "candidates": [{"support": f.support.label(design.names, model.phi_names),
                        "size": len(f.support), "nu0_indices": f.nu0_indices,
                        "loglik": f.loglik, "ebic": f.ebic, "error": f.error}
                       for f in result.fits],
        "failures": {str(k): v for k, v in sorted(result.failures.items())},
    })


def _write_trace(path: Path, res) -> None:
    io.write_csv(path, ["iteration"] + list(res.trace_names),
                 ([k] + list(row) for k, row in enumerate(res.traces)))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def write_two_step(out: Path, result: TwoStepResult, obs, design, model, variant: str,
                   seed: int) -> None:
    """``individual_fits.csv``, ``lasso_path.csv`` and ``result.json`` for the baseline."""
    io.write_csv(out / "individual_fits.csv",
                 ["id", "converged", "residual_ss", "evaluations"]
                 + [f"phi_hat_{c}" for c in model.phi_names],
                 ([obs.ids[i], f.converged, f.residual_ss, f.iterations] + list(f.phi_hat)
                  for i, f in enumerate(result.fits)))
    comps = [model.phi_names[m] for m in np.flatnonzero(model.selection_mask)]
    rows = []
    for k, path in enumerate(result.paths):
        targets = [comps[k]] if variant == "gaussian" else comps
        coefs = path.coefs.reshape(len(path.lambda_values), design.p, -1)
        for i, lam in enumerate(path.lambda_values):
            for l in range(design.p):
                for c, comp in enumerate(targets):
                    rows.append([comp if variant == "gaussian" else "group", i, lam, path.cv_mse[i],
                                 path.cv_se[i], lam == path.lambda_1se, design.names[l], comp,
                                 coefs[i, l, c]])
    io.write_csv(out / "lasso_path.csv",
                 ["fit", "lambda_index", "lambda", "cv_mse", "cv_se", "is_1se", "covariate",
                  "component", "coef"], rows)
    io.write_json(out / "result.json", {
        "kind": f"two_step_{variant}", "seed": seed,
        "support": _support_list(result.support, design, model),
        "support_label": result.support.label(design.names, model.phi_names),
        "n_converged": result.n_converged,
        "lambda_1se": [path.lambda_1se for path in result.paths],
        "covariates": list(design.names), "components": list(model.phi_names),
        "selection_mask": list(model.selection_mask)})


def cmd_select(cfg: RunConfig, argv: Sequence[str] = ()) -> int:
    started = time.perf_counter()
    obs, design, inputs = _load_data(cfg)
    model, settings = resolve_settings(cfg, design.p, design.p_f)
    out = io.ensure_dir(cfg.out)
    if cfg.method != "saemvs":
        variant = cfg.method.rsplit("_", 1)[1]
        th0 = settings.theta0
        ts = two_step_select(obs, design, model, variant, phi_init=th0.mu,
                             psi=th0.eta if model.s else None, seed=cfg.seed,
                             workers=cfg.workers)
        write_two_step(out, ts, obs, design, model, variant, cfg.seed)
        io.write_json(out / "manifest.json", _manifest(cfg, argv, started, inputs=inputs,
                                                       workers=cfg.workers))
        return 0
    result = run_saemvs(obs, design, model, settings.hyper, settings.grid, settings.schedule,
                        settings.theta0, cfg.seed, mle_schedule=settings.mle_schedule,
                        T=settings.T, workers=cfg.workers, keep_traces=cfg.keep_traces)
    write_selection(out, result, design, model)
    if cfg.keep_traces:
        tdir = io.ensure_dir(out / "traces")
        for g, res in enumerate(result.map_results):
            if res is not None:
                _write_trace(tdir / f"trace_{g:03d}.csv", res)
    io.write_json(out / "manifest.json", _manifest(
        cfg, argv, started, inputs=inputs, settings=settings_document(model, settings),
        workers=cfg.workers))
    return 0


def cmd_map(cfg: RunConfig, argv: Sequence[str] = ()) -> int:
    started = time.perf_counter()
    obs, design, inputs = _load_data(cfg)
    model, settings = resolve_settings(cfg, design.p, design.p_f)
    nu0 = settings.hyper.nu0 if cfg.nu0 is None else float(cfg.nu0)
    hyper = settings.hyper.with_nu0(nu0)
    out = io.ensure_dir(cfg.out)
    res = run_map(obs, design, model, hyper, settings.schedule, settings.theta0,
                  np.random.SeedSequence([cfg.seed, 0]))
    th = res.theta_hat
    mask = np.asarray(model.selection_mask, bool)
    sup = select_support(th.beta, th.alpha, nu0, hyper.nu1, mask)
    thr = np.where(mask, threshold(nu0, hyper.nu1, th.alpha), np.nan)
    io.write_csv(out / "path.csv", PATH_HEADER, _path_rows(0, nu0, th.beta, design, model))
    io.write_csv(out / "criteria.csv", _criteria_header(model),
                 [[0, nu0, "ok", 0, len(sup), sup.label(design.names, model.phi_names), None, None,
                   True] + list(th.alpha) + list(thr) + [None]])
    _write_trace(out / "trace.csv", res)
    io.write_json(out / "result.json", {
        "kind": "map", "seed": cfg.seed, "nu1": hyper.nu1, "grid": [nu0], "nu0_hat": nu0,
        "nu0_hat_index": 0, "support": _support_list(sup, design, model),
        "support_label": sup.label(design.names, model.phi_names), "theta_map": th.to_dict(),
        "pstar": res.final_pstar, "acceptance_phi": res.acceptance_phi,
        "acceptance_psi": res.acceptance_psi, "covariates": list(design.names),
        "components": list(model.phi_names), "selection_mask": list(model.selection_mask)})
    io.write_json(out / "manifest.json", _manifest(
        cfg, argv, started, inputs=inputs, settings=settings_document(model, settings),
        workers=cfg.workers))
    return 0


METRIC_KEYS = ("se", "sp", "ac", "outcome", "tp", "fp", "fn", "tn")


def _metrics_header(q: int, phi_names, extra=()) -> List[str]:
    return (list(extra) + ["method", "replicate", "seed"] + list(METRIC_KEYS)
            + [f"outcome_{c}" for c in phi_names] + [f"mee_{c}" for c in phi_names]
            + ["nu0_hat", "n_converged", "support", "error"])


def _metrics_rows(report: MetricsReport, q: int, extra=()):
    for r in report.records:
        met = r.metrics or {}
        comp = [cm["outcome"] if cm else None for cm in r.component_metrics]
        comp += [None] * (q - len(comp))
        mee = list(r.mee) if r.mee is not None else [None] * q
        yield (list(extra) + [r.method, r.index, r.seed] + [met.get(k) for k in METRIC_KEYS]
               + comp + mee + [r.nu0_hat, r.n_converged, r.support, r.error])


def _campaign_settings(cfg: RunConfig, spec):
    cfg = replace(cfg, model=spec.model_name, model_constants=dict(spec.model_constants))
    return resolve_settings(cfg, spec.p)


def _summary(report: MetricsReport) -> dict:
    return report.to_dict()


def cmd_simulate(cfg: RunConfig, argv: Sequence[str] = ()) -> int:
    started = time.perf_counter()
    spec = scenario_from(cfg)
    model, settings = _campaign_settings(cfg, spec)
    folds = int(cfg.simulation.get("folds", 10))
    out = io.ensure_dir(cfg.out)
    report = run_campaign(spec, cfg.method, settings, workers=cfg.workers, folds=folds)
    io.write_csv(out / "metrics.csv", _metrics_header(spec.q, model.phi_names),
                 _metrics_rows(report, spec.q))
    io.write_json(out / "summary.json", {"design": cfg.simulation, "scenario": _scenario_doc(spec),
                                         "report": _summary(report)})
    io.write_json(out / "manifest.json", _manifest(
        cfg, argv, started, settings=settings_document(model, settings), workers=cfg.workers))
    return 0


def _scenario_doc(spec) -> dict:
    return {"model": spec.model_name, "n": spec.n, "p": spec.p, "replicates": spec.replicates,
            "base_seed": spec.base_seed, "p_partial": spec.p_partial,
            "covariate_law": spec.covariate_law, "ar_scenario": spec.ar_scenario, "rho": spec.rho,
            "true_mu": list(spec.true_mu), "true_Gamma": spec.true_Gamma.tolist(),
            "true_sigma2": spec.true_sigma2, "true_psi": list(spec.true_psi),
            "truth": sorted([list(t) for t in spec.truth.sorted()])}


def cmd_benchmark(cfg: RunConfig, argv: Sequence[str] = ()) -> int:
    started = time.perf_counter()
    fractions = cfg.p_partial_values or (None,)
    specs = [scenario_from(cfg, f) for f in fractions]
    model, settings = _campaign_settings(cfg, specs[0])
    folds = int(cfg.simulation.get("folds", 10))
    out = io.ensure_dir(cfg.out)
    rows, entries, timing = [], [], {}
    for spec in specs:
        for method in cfg.methods:
            t0 = time.perf_counter()
            report = run_campaign(spec, method, settings, workers=cfg.workers, folds=folds)
            timing[f"{spec.p_partial}/{method}"] = round(time.perf_counter() - t0, 3)
            rows.extend(_metrics_rows(report, spec.q, (spec.p_partial,)))
            entries.append({"p_partial": spec.p_partial, **_summary(report)})
    io.write_csv(out / "metrics.csv", _metrics_header(model.q, model.phi_names, ("p_partial",)),
                 rows)
    io.write_json(out / "summary.json", {"design": cfg.simulation,
                                         "scenario": _scenario_doc(specs[0]),
                                         "results": entries})
    io.write_json(out / "manifest.json", _manifest(
        cfg, argv, started, settings=settings_document(model, settings), workers=cfg.workers,
        campaign_seconds=timing))
    return 0


THRESHOLD_HEADER = ("nu0_index", "nu0", "covariate", "component", "beta", "threshold", "selected")


def threshold_path_rows(run_dir: Path):
    """Join ``path.csv`` with the per-point thresholds stored in ``criteria.csv``."""
    io.require_artifacts(run_dir, ("path.csv", "criteria.csv", "result.json"))
    header, crit = io.read_csv(run_dir / "criteria.csv")
    col = {h: k for k, h in enumerate(header)}
    thresholds = {}
    for row in crit:
        if row[col["status"]] == "failed":
            continue
        g = int(row[col["nu0_index"]])
        thresholds[g] = {h[len("threshold_"):]: float(row[k]) for h, k in col.items()
                         if h.startswith("threshold_") and row[k] != ""}
    header, path = io.read_csv(run_dir / "path.csv")
    if tuple(header) != PATH_HEADER:
        raise IoError(f"{run_dir / 'path.csv'} has an unexpected header")
    for g, nu0, cov, comp, beta in path:
        g = int(g)
        if g not in thresholds:
            raise MissingArtifacts(f"criteria.csv has no threshold for grid point {g}")
        s = thresholds[g][comp]
        b = float(beta)
        yield g, float(nu0), cov, comp, b, s, abs(b) >= s


def cmd_threshold_path(cfg: RunConfig, argv: Sequence[str] = ()) -> int:
    started = time.perf_counter()
    if cfg.run_dir is None:
        raise ConfigError("threshold-path needs a run directory")
    run_dir = Path(cfg.run_dir)
    rows = list(threshold_path_rows(run_dir))
    out = io.ensure_dir(cfg.out if cfg.out != RunConfig.out else run_dir)
    io.write_csv(out / "threshold_path.csv", THRESHOLD_HEADER, rows)
    io.write_json(out / "threshold_manifest.json", _manifest(
        cfg, argv, started, source={"run_dir": str(run_dir),
                                    "path_sha256": io.sha256(run_dir / "path.csv"),
                                    "criteria_sha256": io.sha256(run_dir / "criteria.csv")}))
    return 0


COMMANDS = {"select": cmd_select, "map": cmd_map, "simulate": cmd_simulate,
            "benchmark": cmd_benchmark, "threshold-path": cmd_threshold_path}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _parser().parse_args(argv)
    try:
        cfg = build_config(args)
        return COMMANDS[cfg.subcommand](cfg, argv)
    except SaemvsError as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "exit_code": exit_code(exc)}) + "\n")
        return exit_code(exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
