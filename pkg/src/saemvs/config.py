"""Run configuration: TOML parsing, defaults and resolution into settings objects.

A config file is a TOML document with optional tables ``[data]``, ``[model]``,
``[hyper]``, ``[schedule]``, ``[mle_schedule]``, ``[grid]``, ``[init]``,
``[selection]``, ``[simulation]`` and ``[benchmark]``.  Anything left out
falls back to the reference settings of the chosen model (logistic growth or
one-compartment PK); other models get generic defaults.  Command-line flags
override the file.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError
from .model import HyperParams, PopulationParams, get_model
from .saem import SaemSchedule
from .selection import Grid
from .simulation import (METHODS, SaemvsSettings, ScenarioSpec, logistic_scenario,
                         logistic_settings, pk_scenario, pk_settings)

SUBCOMMANDS = ("select", "map", "simulate", "benchmark", "threshold-path")
TABLES = ("data", "model", "hyper", "schedule", "mle_schedule", "grid", "init", "selection",
          "simulation", "benchmark")
_HYPER_KEYS = {f for f in HyperParams.__dataclass_fields__}
_SCHEDULE_KEYS = {f for f in SaemSchedule.__dataclass_fields__}
_INIT_KEYS = {"mu", "Gamma", "sigma2", "alpha", "eta", "beta", "beta_lead", "lambda"}
_SIM_KEYS = {"design", "n", "p", "replicates", "base_seed", "p_partial", "Gamma2",
             "ar_scenario", "rho", "folds"}


@dataclass
class RunConfig:
    """Everything a run needs, before resolution against the data dimensions."""

    subcommand: str
    observations: Optional[Path] = None
    covariates: Optional[Path] = None
    forced: Tuple[str, ...] = ()
    run_dir: Optional[Path] = None
    out: Path = Path("saemvs_out")
    model: str = "logistic_growth"
    model_constants: Dict[str, float] = field(default_factory=dict)
    selection_mask: Optional[Tuple[bool, ...]] = None
    hyper: Dict[str, Any] = field(default_factory=dict)
    schedule: Dict[str, Any] = field(default_factory=dict)
    mle_schedule: Dict[str, Any] = field(default_factory=dict)
    grid_log10: Optional[Tuple[float, float, int]] = None
    grid_values: Optional[Tuple[float, ...]] = None
    init: Dict[str, Any] = field(default_factory=dict)
    T: Optional[int] = None
    nu0: Optional[float] = None
    seed: int = 0
    workers: Optional[int] = None
    method: str = "saemvs"
    methods: Tuple[str, ...] = METHODS
    simulation: Dict[str, Any] = field(default_factory=dict)
    p_partial_values: Tuple[float, ...] = ()
    keep_traces: bool = False

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, Path):
                out[k] = str(v)
        return out


def _check_keys(table: dict, allowed, where: str):
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {unknown}")


def load_toml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return doc


def from_document(doc: dict, subcommand: str, base_dir: Path = Path(".")) -> RunConfig:
    """Build a :class:`RunConfig` from a parsed TOML document.

    Relative data paths are taken relative to ``base_dir`` (the config's folder).
    """
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    top = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    _check_keys(top, ("seed", "threads", "out", "method"), "top level")
    _check_keys({k: v for k, v in doc.items() if isinstance(v, dict)}, TABLES, "document")
    cfg = RunConfig(subcommand)

    def path(v):
        p = Path(v)
        return p if p.is_absolute() else base_dir / p

    data = doc.get("data", {})
    _check_keys(data, ("observations", "covariates", "forced", "run_dir"), "data")
    if "observations" in data:
        cfg.observations = path(data["observations"])
    if "covariates" in data:
        cfg.covariates = path(data["covariates"])
    if "run_dir" in data:
        cfg.run_dir = path(data["run_dir"])
    cfg.forced = tuple(data.get("forced", ()))

    model = doc.get("model", {})
    _check_keys(model, ("name", "constants", "selection_mask"), "model")
    cfg.model = model.get("name", cfg.model)
    cfg.model_constants = dict(model.get("constants", {}))
    if "selection_mask" in model:
        cfg.selection_mask = tuple(bool(v) for v in model["selection_mask"])

    cfg.hyper = dict(doc.get("hyper", {}))
    _check_keys(cfg.hyper, _HYPER_KEYS, "hyper")
    cfg.schedule = dict(doc.get("schedule", {}))
    _check_keys(cfg.schedule, _SCHEDULE_KEYS, "schedule")
    cfg.mle_schedule = dict(doc.get("mle_schedule", {}))
    _check_keys(cfg.mle_schedule, _SCHEDULE_KEYS, "mle_schedule")

    grid = doc.get("grid", {})
    _check_keys(grid, ("log10", "values"), "grid")
    if "log10" in grid:
        lo, hi, count = grid["log10"]
        cfg.grid_log10 = (float(lo), float(hi), int(count))
    if "values" in grid:
        cfg.grid_values = tuple(float(v) for v in grid["values"])

    cfg.init = dict(doc.get("init", {}))
    _check_keys(cfg.init, _INIT_KEYS, "init")

    sel = doc.get("selection", {})
    _check_keys(sel, ("T", "nu0", "keep_traces"), "selection")
    cfg.T = sel.get("T")
    cfg.nu0 = sel.get("nu0")
    cfg.keep_traces = bool(sel.get("keep_traces", False))

    cfg.simulation = dict(doc.get("simulation", {}))
    _check_keys(cfg.simulation, _SIM_KEYS, "simulation")
    bench = doc.get("benchmark", {})
    _check_keys(bench, ("methods", "p_partial"), "benchmark")
    if "methods" in bench:
        cfg.methods = tuple(bench["methods"])
    if "p_partial" in bench:
        cfg.p_partial_values = tuple(float(v) for v in bench["p_partial"])

    cfg.seed = int(top.get("seed", cfg.seed))
    if "threads" in top:
        cfg.workers = int(top["threads"])
    if "out" in top:
        cfg.out = path(top["out"])
    if "method" in top:
        cfg.method = top["method"]
    return cfg


def normalize_method(name: str) -> str:
    key = name.replace("-", "_")
    if key not in METHODS:
        raise ConfigError(f"unknown method {name!r}; choose from "
                          f"{[m.replace('_', '-') for m in METHODS]}")
    return key


# ---------------------------------------------------------------------------
# Resolution
# ---------------------------------------------------------------------------


def reference_settings(model_name: str, p: int, q: int, s: int) -> SaemvsSettings:
    """Reference settings for the two benchmark models, generic ones otherwise."""
    if model_name == "logistic_growth":
        return logistic_settings(p)
    if model_name == "one_compartment_pk":
        return pk_settings(p)
    theta0 = PopulationParams.initial(q, p, mu=1.0, Gamma=1.0, sigma2=1.0, beta=0.0, alpha=0.5,
                                      eta=np.ones(s))
    return SaemvsSettings(HyperParams(nu1=1000.0, sigma2_mu=1e4), SaemSchedule(),
                          Grid.from_log10(-2.0, 2.0, 20), theta0)


def _initial_params(base: PopulationParams, init: Dict[str, Any], p_f: int) -> PopulationParams:
    q, p = base.q, base.p
    beta = base.beta
    if "beta" in init:
        beta = np.broadcast_to(np.asarray(init["beta"], float), (p, q)).copy()
    if "beta_lead" in init:
        count, value = init["beta_lead"]
        beta = np.array(beta)
        beta[:min(int(count), p)] = float(value)
    lam = np.asarray(init.get("lambda", 0.0), float)
    eta = init.get("eta", base.eta)
    return PopulationParams.initial(q, p, p_f, mu=init.get("mu", base.mu),
                                    Gamma=init.get("Gamma", base.Gamma),
                                    sigma2=init.get("sigma2", base.sigma2), beta=beta,
                                    lam=lam, alpha=init.get("alpha", base.alpha),
                                    eta=eta).validate()


def resolve_settings(cfg: RunConfig, p: int, p_f: int = 0) -> Tuple[Any, SaemvsSettings]:
    """Model and fully resolved SAEMVS settings for a design with ``p`` covariates."""
    model = get_model(cfg.model, **cfg.model_constants)
    if cfg.selection_mask is not None:
        model = model.with_mask(cfg.selection_mask)
    ref = reference_settings(cfg.model, p, model.q, model.s)
    try:
        hyper = replace(ref.hyper, **_hyper_values(cfg.hyper))
        schedule = replace(ref.schedule, **cfg.schedule)
        base_mle = ref.mle_schedule or schedule
        mle_schedule = replace(base_mle, **cfg.mle_schedule) if cfg.mle_schedule else \
            (ref.mle_schedule if ref.mle_schedule is not None else None)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.grid_values is not None:
        grid = Grid(cfg.grid_values)
    elif cfg.grid_log10 is not None:
        grid = Grid.from_log10(*cfg.grid_log10)
    else:
        grid = ref.grid
    grid.check(hyper.nu1)
    theta0 = _initial_params(ref.theta0, cfg.init, p_f)
    if theta0.q != model.q or theta0.eta.shape[0] != model.s:
        raise ConfigError(f"initial values do not match model {cfg.model!r} "
                          f"(q={model.q}, s={model.s})")
    T = ref.T if cfg.T is None else int(cfg.T)
    if T < 1:
        raise ConfigError("T must be positive")
    return model, SaemvsSettings(hyper, schedule, grid, theta0, mle_schedule, T)


def _hyper_values(table: Dict[str, Any]) -> Dict[str, Any]:
    out = {}
    for k, v in table.items():
        out[k] = np.asarray(v, float) if isinstance(v, list) else v
    return out


def scenario_from(cfg: RunConfig, p_partial: Optional[float] = None) -> ScenarioSpec:
    """Simulation design described by the ``[simulation]`` table."""
    sim = dict(cfg.simulation)
    design = sim.pop("design", "logistic")
    sim.pop("folds", None)
    base_seed = int(sim.pop("base_seed", cfg.seed))
    if p_partial is not None:
        sim["p_partial"] = p_partial
    try:
        if design == "logistic":
            if "p_partial" in sim:
                raise ConfigError("p_partial applies to the pk design only")
            if sim.get("ar_scenario") and "rho" not in sim:
                raise ConfigError("ar_scenario needs an explicit rho")
            return logistic_scenario(base_seed=base_seed, **sim)
        if design == "pk":
            for key in ("Gamma2", "ar_scenario", "rho"):
                if key in sim:
                    raise ConfigError(f"{key} applies to the logistic design only")
            return pk_scenario(base_seed=base_seed, **sim)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    raise ConfigError(f"unknown simulation design {design!r}; use 'logistic' or 'pk'")


def settings_document(model, settings: SaemvsSettings) -> dict:
    """JSON-ready echo of resolved settings, written to every manifest."""
    resolved = settings.hyper.resolved(model.q, model.s, settings.theta0.p)
    return {"model": {"name": model.name, "constants": dict(model.constants),
                      "selection_mask": list(model.selection_mask)},
            "hyper": resolved.to_dict(),
            "schedule": asdict(settings.schedule),
            "mle_schedule": None if settings.mle_schedule is None else asdict(settings.mle_schedule),
            "grid": list(settings.grid.nu0_values),
            "init": settings.theta0.to_dict(),
            "T": settings.T}
