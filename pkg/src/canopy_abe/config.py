"""Pipeline configuration (TOML).

Relative paths resolve against the directory holding the config file.
Input paths that are left out default to the files the ``simulate`` command
writes under ``<output>/world``.
"""

from __future__ import annotations

import datetime as dt
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ValidationError
from .simulate import SimConfig

WORLD_DIR = "world"


@dataclass
class Paths:
    output: Path
    dtm: Path
    stands: Path
    plots: Path
    points: dict[str, Path]
    trees: Path | None = None
    truth: Path | None = None

    @property
    def world(self) -> Path:
        return self.output / WORLD_DIR


@dataclass
class SimulationPlan:
    world: SimConfig = field(default_factory=SimConfig)
    fmi_plots_per_project: int = 36
    nfi_plots_per_project: int = 14
    nfi_spacing: float = 40.0
    validation_project: str | None = "B"
    validation_stands: int = 6
    validation_plots_per_stand: int = 10
    validation_area_ha: tuple[float, float] = (1.5, 5.5)


@dataclass
class PipelineConfig:
    paths: Paths
    projects: list[str]
    strata: list[str] = field(default_factory=lambda: ["mature_spruce", "other"])
    stratum: str = "mature_spruce"
    dbh_threshold_cm: float = 10.0
    target_date: dt.date = dt.date(2017, 7, 1)
    plot_area_m2: float = 250.0
    cell_size: float = 16.0
    grid_origin: tuple[float, float] | None = None
    families: list[str] = field(default_factory=lambda: ["fmi_loglog", "nfi_mixed", "nfi_all", "nfi_adjusted"])
    max_predictors: int = 4
    method: str = "REML"
    loocv_reselect: bool = False
    top_k: int = 7
    outlier_threshold: float = 3.0
    per_project: int = 200
    min_area_ha: float = 1.0
    min_compactness: float = 0.2
    clamp_predictors: bool = True
    local_inventory_only: bool = True
    seed: int = 42
    simulation: SimulationPlan = field(default_factory=SimulationPlan)


def _sim_config(section: dict, seed: int) -> SimulationPlan:
    names = {f.name for f in fields(SimConfig)}
    world_kw = {}
    plan_kw = {}
    plan_names = {f.name for f in fields(SimulationPlan)} - {"world"}
    for key, value in section.items():
        if key in names:
            world_kw[key] = tuple(value) if isinstance(value, list) else value
        elif key in plan_names:
            plan_kw[key] = tuple(value) if isinstance(value, list) else value
        else:
            raise ValidationError(f"unknown [simulate] key {key!r}")
    world_kw.setdefault("seed", seed)
    return SimulationPlan(world=SimConfig(**world_kw), **plan_kw)


def load_config(path, out: str | None = None, seed: int | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    base = path.parent.resolve()

    def resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    sections = doc.get("seeds", {})
    master = int(seed if seed is not None else sections.get("seed", 42))
    plan = _sim_config(doc.get("simulate", {}), master)
    if seed is not None:
        plan.world = SimConfig(**{**{f.name: getattr(plan.world, f.name) for f in fields(SimConfig)},
                                  "seed": master})

    p = doc.get("paths", {})
    output = Path(out) if out is not None else resolve(p.get("output", "out"))
    output = output if output.is_absolute() else Path.cwd() / output
    world = output / WORLD_DIR
    projects = list(doc.get("projects", {}).get("ids", plan.world.project_ids))
    pts = p.get("points")
    if isinstance(pts, dict):
        points = {k: resolve(v) for k, v in pts.items()}
        projects = list(pts.keys()) if "projects" not in doc else projects
    else:
        points = {pid: world / f"points_{pid}.txt" for pid in projects}

    def opt(key, default):
        if key in p:
            return resolve(p[key])
        return default

    paths = Paths(output=output, dtm=opt("dtm", world / "dtm.asc"),
                  stands=opt("stands", world / "stands.geojson"),
                  plots=opt("plots", world / "plots.csv"), points=points,
                  trees=opt("trees", world / "trees.csv" if "plots" not in p else None),
                  truth=opt("truth", world / "truth.csv" if "plots" not in p else None))

    inv = doc.get("inventory", {})
    grid = doc.get("grid", {})
    models = doc.get("models", {})
    est = doc.get("estimate", {})
    cfg = PipelineConfig(paths=paths, projects=projects)
    cfg.strata = list(inv.get("strata", cfg.strata))
    cfg.stratum = inv.get("stratum", cfg.stratum)
    if cfg.stratum not in cfg.strata:
        raise ValidationError(f"stratum {cfg.stratum!r} not among declared strata {cfg.strata}")
    cfg.dbh_threshold_cm = float(inv.get("dbh_threshold_cm", cfg.dbh_threshold_cm))
    td = inv.get("target_date", cfg.target_date)
    cfg.target_date = td if isinstance(td, dt.date) else dt.date.fromisoformat(str(td))
    cfg.plot_area_m2 = float(inv.get("plot_area_m2", cfg.plot_area_m2))
    cfg.cell_size = float(grid.get("cell_size", cfg.cell_size))
    if "origin_x" in grid or "origin_y" in grid:
        cfg.grid_origin = (float(grid["origin_x"]), float(grid["origin_y"]))
    cfg.families = list(models.get("families", cfg.families))
    unknown = set(cfg.families) - {"fmi_loglog", "nfi_mixed", "nfi_all", "nfi_adjusted"}
    if unknown:
        raise ValidationError(f"unknown model families {sorted(unknown)}")
    cfg.max_predictors = int(models.get("max_predictors", cfg.max_predictors))
    cfg.method = "REML" if models.get("reml", True) else "ML"
    cfg.loocv_reselect = bool(models.get("loocv_reselect", cfg.loocv_reselect))
    cfg.top_k = int(models.get("top_k", cfg.top_k))
    cfg.outlier_threshold = float(models.get("outlier_threshold", cfg.outlier_threshold))
    cfg.per_project = int(est.get("per_project", cfg.per_project))
    cfg.min_area_ha = float(est.get("min_area_ha", cfg.min_area_ha))
    cfg.min_compactness = float(est.get("min_compactness", cfg.min_compactness))
    cfg.clamp_predictors = bool(est.get("clamp_predictors", cfg.clamp_predictors))
    cfg.local_inventory_only = bool(est.get("local_inventory_only", cfg.local_inventory_only))
    cfg.seed = master
    cfg.simulation = plan
    return cfg
