"""File-based pipeline steps behind the command-line interface.

Every step reads its inputs from the configured paths, writes into the
output directory and is deterministic for a given config and seed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .errors import ValidationError
from .geometry import (
    CirclePlot,
    GridSpec,
    clip_to_plot,
    read_stands_geojson,
    write_stands_geojson,
)
from .inventory import (
    PlotRecord,
    adjust_trees,
    filter_stratum,
    harmonize_dbh,
    plot_volume_ha,
    read_plots_csv,
    read_trees_csv,
    write_plots_csv,
    write_trees_csv,
)
from .metrics import compute_metrics, read_metric_csv, write_metric_csv
from .pointcloud_io import (
    normalize_heights,
    read_ascii_grid,
    read_point_text,
    write_ascii_grid,
    write_point_text,
)
from .regression import load_model, residual_diagnostics, save_model
from .simulate import generate_world, measured_trees, random_dates, sample_plots, simulate_als, _rng
from .study import (
    MIXED_FAMILIES,
    family_label,
    fit_fmi_models,
    fit_mixed_family,
    fmi_summary_rows,
    independent_table,
    loglog_loocv,
    mixed_predictions_at,
    observations,
    plot_validation_table,
    predict_with,
    stand_comparison_table,
    stand_estimates,
)
from .validation import accuracy, select_stands

log = logging.getLogger(__name__)

MODELS_DIR = "models"
REPORTS_DIR = "reports"


def _write_json(doc, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n",
                    encoding="utf-8")


def _finite(v):
    return v if isinstance(v, (int, str)) or (v is not None and math.isfinite(v)) else None


# -- simulate ---------------------------------------------------------------


def run_simulate(cfg: PipelineConfig) -> Path:
    """Write a synthetic world in the formats the other steps consume."""
    plan = cfg.simulation
    world = generate_world(plan.world)
    out = cfg.paths.world
    out.mkdir(parents=True, exist_ok=True)
    seed = plan.world.seed
    write_ascii_grid(world.dtm, out / "dtm.asc")
    write_stands_geojson(world.stands, out / "stands.geojson")
    for pid in world.config.project_ids:
        write_point_text(simulate_als(world, pid), out / f"points_{pid}.txt")
        log.info("simulated ALS for project %s", pid)

    fmi = sample_plots(world, "systematic_cluster", plan.fmi_plots_per_project, seed=seed,
                       source="FMI", stratum=cfg.stratum, within=world.fmi_stands)
    nfi = sample_plots(world, "random_grid", plan.nfi_plots_per_project, seed=seed + 1000,
                       source="NFI", stratum=cfg.stratum, spacing=plan.nfi_spacing)
    # a few plots of the other strata, which the stratum filter must drop
    others = [s for s in cfg.strata if s != cfg.stratum]
    extra = []
    for j, stratum in enumerate(others):
        try:
            extra += sample_plots(world, "random_grid", 3, seed=seed + 2000 + j, source="NFI",
                                  stratum=stratum, spacing=plan.nfi_spacing,
                                  prefix=f"NFI{stratum[:1].upper()}")
        except ValidationError:
            log.info("no %s plots in the synthetic world", stratum)

    val = []
    if plan.validation_project is not None:
        lo, hi = plan.validation_area_ha
        cands = [s for s in world.stands
                 if s.als_project == plan.validation_project and s.stratum == cfg.stratum
                 and s.id not in world.fmi_stands and lo <= s.area / 1e4 <= hi]
        if cands:
            pick = _rng(seed, 5).choice(len(cands), size=min(plan.validation_stands, len(cands)),
                                        replace=False)
            chosen = [cands[i].id for i in sorted(pick)]
            val = sample_plots(world, "random_grid", plan.validation_plots_per_stand,
                               seed=seed + 3000, source="VALIDATION", stratum=cfg.stratum,
                               stands=chosen, spacing=20.0)
        else:
            log.warning("no stand qualifies for independent validation plots")

    # field-measured plots carry tree lists recorded on the measurement date
    rng = _rng(seed, 6)
    measured = fmi + nfi + extra
    dates = random_dates(len(measured), rng)
    trees = []
    plots = []
    for p, d in zip(measured, dates):
        rec = PlotRecord(p.plot_id, p.source, p.center_x, p.center_y, p.als_project, p.stratum,
                         p.volume_ha, d)
        trees += measured_trees(world, rec, cfg.dbh_threshold_cm, rng)
        plots.append(rec)
    plots += val
    write_plots_csv(plots, out / "plots.csv")
    write_trees_csv(trees, out / "trees.csv")
    with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stand_id", "als_project", "stratum", "volume_ha"])
        for s in world.stands:
            w.writerow([s.id, s.als_project, s.stratum, repr(world.true_volume[s.id])])
    log.info("world written: %d stands, %d plots, %d trees", len(world.stands), len(plots),
             len(trees))
    return out


# -- metrics ----------------------------------------------------------------


def _grid_for(cfg: PipelineConfig, cloud) -> GridSpec:
    s = cfg.cell_size
    if cfg.grid_origin is None:
        return GridSpec.covering(float(cloud.x.min()), float(cloud.y.min()),
                                 float(cloud.x.max()), float(cloud.y.max()), s)
    ox, oy = cfg.grid_origin
    ncols = max(1, math.floor((float(cloud.x.max()) - ox) / s) + 1)
    nrows = max(1, math.floor((float(cloud.y.max()) - oy) / s) + 1)
    return GridSpec(ox, oy, ncols, nrows, s)


def cell_id(col: int, row: int) -> str:
    return f"{col}_{row}"


def run_metrics(cfg: PipelineConfig) -> Path:
    """Plot metrics for every field plot and grid-cell metrics per project."""
    out = cfg.paths.output
    out.mkdir(parents=True, exist_ok=True)
    dtm = read_ascii_grid(cfg.paths.dtm)
    plots = read_plots_csv(cfg.paths.plots)
    plot_rows = []
    for pid in cfg.projects:
        path = cfg.paths.points.get(pid)
        if path is None:
            raise ValidationError(f"no point file configured for project {pid}")
        cloud, rep = normalize_heights(read_point_text(path, crs_id=pid), dtm)
        if rep.count:
            log.warning("project %s: %d points outside the terrain model dropped", pid, rep.count)
        if len(cloud) == 0:
            raise ValidationError(f"project {pid}: no points over the terrain model")
        for p in plots:
            if p.als_project == pid:
                plot_rows.append((p.plot_id, compute_metrics(
                    clip_to_plot(cloud, CirclePlot(p.plot_id, p.center_x, p.center_y,
                                                   cfg.plot_area_m2)))))
        grid = _grid_for(cfg, cloud)
        col, row = grid.cell_of(cloud.x, cloud.y)
        flat = np.where(col >= 0, row * grid.ncols + col, -1)
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(grid.ncols * grid.nrows + 1))
        rows = []
        for k, (c, r) in enumerate(grid.cells()):
            idx = order[bounds[k]:bounds[k + 1]]
            rows.append((cell_id(c, r), compute_metrics(cloud.subset(idx)) if idx.size else {}))
        write_metric_csv(rows, out / f"cells_{pid}.csv")
        _write_json({"origin_x": grid.origin_x, "origin_y": grid.origin_y, "ncols": grid.ncols,
                     "nrows": grid.nrows, "cell_size": grid.cell_size}, out / f"grid_{pid}.json")
        log.info("project %s: %d points, %dx%d cells", pid, len(cloud), grid.ncols, grid.nrows)
    missing = [p.plot_id for p in plots if p.als_project not in cfg.projects]
    if missing:
        log.warning("%d plots lie in unconfigured projects: %s", len(missing), missing[:5])
    write_metric_csv(plot_rows, out / "plot_metrics.csv")
    return out


# -- fit ----------------------------------------------------------------------


def load_plots(cfg: PipelineConfig) -> list[PlotRecord]:
    """Plot records, with volumes rebuilt from tree lists where available.

    Tree lists are harmonised to the dbh threshold and fore- or back-cast to
    the target date.
    """
    plots = read_plots_csv(cfg.paths.plots)
    if cfg.paths.trees is None or not Path(cfg.paths.trees).is_file():
        return plots
    by_plot: dict[str, list] = {}
    for t in read_trees_csv(cfg.paths.trees):
        by_plot.setdefault(t.plot_id, []).append(t)
    out = []
    for p in plots:
        trees = by_plot.get(p.plot_id)
        if trees is not None:
            kept = adjust_trees(harmonize_dbh(trees, cfg.dbh_threshold_cm), p.measurement_date,
                                cfg.target_date)
            p = PlotRecord(p.plot_id, p.source, p.center_x, p.center_y, p.als_project, p.stratum,
                           plot_volume_ha(kept, cfg.plot_area_m2), cfg.target_date)
        out.append(p)
    return out


def _study_data(cfg: PipelineConfig):
    plots = filter_stratum(load_plots(cfg), cfg.stratum, strata=cfg.strata)
    pm = read_metric_csv(cfg.paths.output / "plot_metrics.csv")
    fmi = observations(plots, pm, source="FMI")
    nfi = observations(plots, pm, source="NFI")
    val = observations(plots, pm, source="VALIDATION")
    return plots, fmi, nfi, val


def run_fit(cfg: PipelineConfig) -> Path:
    _, fmi, nfi, _ = _study_data(cfg)
    models_dir = cfg.paths.output / MODELS_DIR
    models_dir.mkdir(parents=True, exist_ok=True)
    fit_log: dict = {}
    if "fmi_loglog" in cfg.families:
        if not fmi:
            raise ValidationError("no local (FMI) plots in the modelling stratum")
        fmi_fit = fit_fmi_models(fmi, max_predictors=cfg.max_predictors)
        for pid, model in fmi_fit.models.items():
            save_model(model, models_dir / f"fmi_loglog_{pid}.json")
        fit_log["fmi_loglog"] = {pid: [{k: _finite(v) if not isinstance(v, list) else v
                                        for k, v in step.items()} for step in tr]
                                 for pid, tr in fmi_fit.traces.items()}
    for family in cfg.families:
        if family not in MIXED_FAMILIES:
            continue
        f = fit_mixed_family(family, nfi, fmi, k=cfg.top_k, method=cfg.method)
        save_model(f.model, models_dir / f"{family}.json")
        diags = residual_diagnostics(f.model, f.data, cfg.outlier_threshold)
        fit_log[family] = {
            "likelihood_trace": [[_finite(a), _finite(b)] for a, b in f.trace],
            "group_sizes": dict(sorted(f.model.group_sizes.items())),
            "appended": f.appended,
            "dropped": f.dropped,
            "outliers": [{"plot_id": d.plot_id, "standardized": _finite(d.standardized)}
                         for d in diags if d.flagged],
        }
        if f.model.warnings:
            for w in f.model.warnings:
                log.warning("%s: %s", family, w)
    _write_json(fit_log, cfg.paths.output / "fit_log.json")
    return models_dir


# -- estimate -----------------------------------------------------------------


def load_models(cfg: PipelineConfig) -> dict[str, object]:
    """Fitted models keyed by family; local models as a project mapping."""
    d = cfg.paths.output / MODELS_DIR
    out: dict[str, object] = {}
    for family in cfg.families:
        if family == "fmi_loglog":
            local = {p.stem.rsplit("_", 1)[1]: load_model(p)
                     for p in sorted(d.glob("fmi_loglog_*.json"))}
            if not local:
                raise ValidationError(f"no local models in {d}; run fit first")
            out[family] = local
        else:
            path = d / f"{family}.json"
            if not path.is_file():
                raise ValidationError(f"missing model file {path}; run fit first")
            out[family] = load_model(path)
    return out


def _load_cells(cfg: PipelineConfig):
    grids, cells = {}, {}
    for pid in cfg.projects:
        g = json.loads((cfg.paths.output / f"grid_{pid}.json").read_text(encoding="utf-8"))
        grids[pid] = GridSpec(g["origin_x"], g["origin_y"], g["ncols"], g["nrows"], g["cell_size"])
        raw = read_metric_csv(cfg.paths.output / f"cells_{pid}.csv")
        cells[pid] = {tuple(int(v) for v in k.split("_")): mv for k, mv in raw.items()}
    return grids, cells


ESTIMATE_COLUMNS = ("stand_id", "als_project", "model", "volume_ha", "n_cells", "skipped",
                    "flagged")


def run_estimate(cfg: PipelineConfig) -> Path:
    models = load_models(cfg)
    grids, cells = _load_cells(cfg)
    stands = [s for s in read_stands_geojson(cfg.paths.stands)
              if s.stratum == cfg.stratum and s.als_project in grids]
    if cfg.local_inventory_only:
        stands = [s for s in stands if s.local_inventory]
    chosen = select_stands(stands, cfg.per_project, cfg.min_area_ha, cfg.min_compactness,
                           seed=cfg.seed)
    if not chosen:
        raise ValidationError("no stand passes the selection filters")
    est = stand_estimates(chosen, grids, cells, models, clamp=cfg.clamp_predictors)
    flagged = sum(e.flagged for e in est)
    if flagged:
        log.warning("%d stand estimates flagged for skipped cells", flagged)
    path = cfg.paths.output / "stand_estimates.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ESTIMATE_COLUMNS)
        for e in est:
            w.writerow([e.stand_id, e.als_project, e.model, repr(e.value), e.n_units, e.skipped,
                        int(e.flagged)])
    return path


def read_stand_estimates(path):
    from .validation import StandEstimate
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            out.append(StandEstimate(r["stand_id"], "synthetic_grid", float(r["volume_ha"]),
                                     int(r["n_cells"]), int(r["skipped"]), r["flagged"] == "1",
                                     r["model"], r["als_project"]))
    return out


# -- validate -----------------------------------------------------------------


def _write_table(table, stem: Path) -> None:
    stem.with_suffix(".csv").write_text(table.to_csv(), encoding="utf-8")
    stem.with_suffix(".txt").write_text(table.to_text(), encoding="utf-8")


def run_validate(cfg: PipelineConfig) -> Path:
    """Accuracy reports: local-model LOOCV, mixed models at local plots,
    stand-level comparison, independent validation and simulator truth."""
    plots, fmi, nfi, val = _study_data(cfg)
    models = load_models(cfg)
    rep_dir = cfg.paths.output / REPORTS_DIR
    rep_dir.mkdir(parents=True, exist_ok=True)
    k = cfg.top_k

    local = models.get("fmi_loglog", {})
    cv: dict[str, np.ndarray] = {}
    plot_level = []
    if local:
        from .study import FmiFit
        for pid, model in local.items():
            rows = [o for o in fmi if o.group == pid]
            cv[pid] = loglog_loocv(rows, model, reselect=cfg.loocv_reselect,
                                   max_predictors=cfg.max_predictors)
        summary = fmi_summary_rows(FmiFit(local, {}), fmi, cv)
        with open(rep_dir / "fmi_loocv.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["als_project", "n", "predictors", "coefficients", "rmsd", "rmsd_pct",
                        "md", "md_pct", "r2"])
            for pid, model, r in summary:
                w.writerow([pid, r.n, " ".join(model.predictor_names),
                            " ".join(repr(float(b)) for b in model.beta), repr(r.rmsd),
                            repr(r.rmsd_pct), repr(r.md), repr(r.md_pct), repr(r.r2)])
        obs = np.array([o.response for pid in cv for o in fmi if o.group == pid])
        plot_level.append(("fmi_loglog", accuracy(obs, np.concatenate(list(cv.values())))))

    mixed = [f for f in cfg.families if f in MIXED_FAMILIES]
    if mixed and fmi:
        blocks = []
        for family in mixed:
            fit = fit_mixed_family(family, nfi, fmi, k=k, method=cfg.method)
            targets = [o for o in fmi if o.metrics.get("zmean_f", 0) > 0 and "perc_n_2m" in o.metrics]
            blocks.append((family_label(family, k), targets, mixed_predictions_at(fit, targets,
                                                                                   cfg.method)))
        _write_table(plot_validation_table(blocks), rep_dir / "plot_validation")

    est_path = cfg.paths.output / "stand_estimates.csv"
    est = read_stand_estimates(est_path) if est_path.is_file() else []
    if est and "fmi_loglog" in models and mixed:
        est_local = [e for e in est if e.model == "fmi_loglog"]
        ids = {e.stand_id for e in est_local}
        est = [e for e in est if e.stand_id in ids]
        table = stand_comparison_table(est, "fmi_loglog",
                                       [(f, family_label(f, k)) for f in mixed])
        _write_table(table, rep_dir / "stand_comparison")

    if val:
        preds = []
        for family, model in models.items():
            if isinstance(model, dict):
                if not all(o.group in model for o in val):
                    continue
                p = [predict_with(model[o.group], o.metrics, o.group) for o in val]
            else:
                p = [predict_with(model, o.metrics, o.group) for o in val]
            preds.append((family_label(family, k), np.array(p)))
        stands = read_stands_geojson(cfg.paths.stands)
        stand_of = {}
        for p in plots:
            if p.source != "VALIDATION":
                continue
            hits = [s.id for s in stands if s.contains(p.center_x, p.center_y)[0]]
            if not hits:
                raise ValidationError(f"validation plot {p.plot_id} lies in no stand")
            stand_of[p.plot_id] = hits[0]
        table = independent_table([o.response for o in val], [stand_of[o.plot_id] for o in val],
                                  preds)
        _write_table(table, rep_dir / "independent_validation")

    truth_path = cfg.paths.truth
    if truth_path is not None and Path(truth_path).is_file() and est:
        with open(truth_path, newline="", encoding="utf-8") as fh:
            truth = {r["stand_id"]: float(r["volume_ha"]) for r in csv.DictReader(fh)}
        with open(rep_dir / "truth_comparison.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "level", "n", "rmsd", "rmsd_pct", "md", "md_pct"])
            for family, r in plot_level:
                w.writerow([family, "plot", r.n, repr(r.rmsd), repr(r.rmsd_pct), repr(r.md),
                            repr(r.md_pct)])
            for family in models:
                sel = [e for e in est if e.model == family and e.stand_id in truth]
                if len(sel) < 1:
                    continue
                r = accuracy([truth[e.stand_id] for e in sel], [e.value for e in sel], "stand")
                w.writerow([family, "stand", r.n, repr(r.rmsd), repr(r.rmsd_pct), repr(r.md),
                            repr(r.md_pct)])
    return rep_dir
