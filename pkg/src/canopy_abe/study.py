"""In-memory study steps shared by the CLI and the end-to-end tests.

Model families:

``fmi_loglog``
    one stepwise log-log model per ALS project, fitted to local plots.
``nfi_mixed``
    the pooled random-slope model fitted to regional plots.
``nfi_all``
    the mixed model refitted to regional plus all local plots.
``nfi_adjusted``
    the mixed model refitted to regional plus the top-k local plots by
    zmean_f per project.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DomainError
from .geometry import GridSpec, StandPolygon
from .inventory import PlotRecord
from .metrics import metric_names
from .regression import (
    LogLogModel,
    MixedModel,
    Observation,
    fit_loglog,
    fit_mixed,
    predict_loglog,
    predict_mixed,
    stepwise_select,
)
from .validation import (
    AccuracyReport,
    StandEstimate,
    accuracy,
    augment_with_top_plots,
    compare_models,
    grouped_accuracy,
    loocv,
    paired_stand_reports,
    synthetic_stand_estimate,
)

log = logging.getLogger(__name__)

MIXED_FAMILIES = ("nfi_mixed", "nfi_all", "nfi_adjusted")
FAMILIES = ("fmi_loglog",) + MIXED_FAMILIES


def family_label(family: str, k: int = 7) -> str:
    return {"nfi_mixed": "NFI", "nfi_all": "NFI & FMI",
            "nfi_adjusted": f"NFI & top {k} FMI", "fmi_loglog": "FMI"}[family]


def observations(plots: Sequence[PlotRecord], plot_metrics: Mapping[str, Mapping[str, float]],
                 source: str | None = None, stratum: str | None = None) -> list[Observation]:
    out = []
    for p in plots:
        if source is not None and p.source != source:
            continue
        if stratum is not None and p.stratum != stratum:
            continue
        out.append(Observation(p.plot_id, p.volume_ha, dict(plot_metrics.get(p.plot_id, {})),
                               p.als_project))
    return out


def usable_for_mixed(data: Sequence[Observation]) -> tuple[list[Observation], list[str]]:
    keep, dropped = [], []
    for o in data:
        if o.metrics.get("zmean_f", 0.0) > 0 and "perc_n_2m" in o.metrics:
            keep.append(o)
        else:
            dropped.append(o.plot_id)
    return keep, dropped


# -- fitting ------------------------------------------------------------------


@dataclass
class FmiFit:
    models: dict[str, LogLogModel]
    traces: dict[str, list]


def fit_fmi_models(data: Sequence[Observation], max_predictors: int = 4,
                   candidates: Sequence[str] | None = None) -> FmiFit:
    by_project: dict[str, list[Observation]] = {}
    for o in data:
        by_project.setdefault(o.group, []).append(o)
    models, traces = {}, {}
    for pid in sorted(by_project):
        trace: list = []
        models[pid] = stepwise_select(by_project[pid], candidates or metric_names(),
                                      max_predictors=max_predictors, trace=trace)
        traces[pid] = trace
    return FmiFit(models, traces)


@dataclass
class MixedFamilyFit:
    family: str
    model: MixedModel
    data: list[Observation]
    appended: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)
    trace: list = field(default_factory=list)


def fit_mixed_family(family: str, nfi: Sequence[Observation], fmi: Sequence[Observation] = (),
                     k: int = 7, method: str = "REML") -> MixedFamilyFit:
    nfi_ok, dropped = usable_for_mixed(nfi)
    fmi_ok, dropped_fmi = usable_for_mixed(fmi)
    if family == "nfi_mixed":
        data, added = list(nfi_ok), []
    elif family == "nfi_all":
        data, added = augment_with_top_plots(nfi_ok, fmi_ok, k=None)
        dropped += dropped_fmi
    elif family == "nfi_adjusted":
        data, added = augment_with_top_plots(nfi_ok, fmi_ok, k=k)
        dropped += dropped_fmi
    else:
        raise ValueError(f"not a mixed-model family: {family}")
    fit = fit_mixed(data, method=method)
    return MixedFamilyFit(family, fit.model, data, [o.plot_id for o in added], dropped, fit.trace)


# -- predictions ----------------------------------------------------------------


def loglog_loocv(data: Sequence[Observation], model: LogLogModel, reselect: bool = False,
                 max_predictors: int = 4) -> np.ndarray:
    """LOOCV of a local model; selection is repeated per fold only if ``reselect``."""
    if reselect:
        fit = lambda rows: stepwise_select(rows, metric_names(), max_predictors=max_predictors)
    else:
        fit = lambda rows: fit_loglog(rows, model.predictor_names)
    return loocv(list(data), fit, lambda m, o: predict_loglog(m, o.metrics))


def mixed_predictions_at(fit: MixedFamilyFit, targets: Sequence[Observation],
                         method: str = "REML") -> np.ndarray:
    """Predict target plots; plots that are part of the modelling data are
    predicted from a refit without them (leave-one-out)."""
    in_model = {o.plot_id: i for i, o in enumerate(fit.data)}
    out = np.empty(len(targets))
    for j, o in enumerate(targets):
        if o.plot_id in in_model:
            i = in_model[o.plot_id]
            rest = fit.data[:i] + fit.data[i + 1:]
            model = fit_mixed(rest, method=method).model
        else:
            model = fit.model
        out[j] = predict_mixed(model, o.metrics, o.group)
    return out


def mixed_loocv(fit: MixedFamilyFit, method: str = "REML") -> np.ndarray:
    return loocv(fit.data, lambda rows: fit_mixed(rows, method=method).model,
                 lambda m, o: predict_mixed(m, o.metrics, o.group))


def predict_with(model, metrics, project, clamp: bool = False):
    if isinstance(model, LogLogModel):
        return predict_loglog(model, metrics, clamp=clamp)
    return predict_mixed(model, metrics, project)


def stand_estimates(stands: Sequence[StandPolygon], grids: Mapping[str, GridSpec],
                    cell_metrics: Mapping[str, Mapping[tuple[int, int], Mapping[str, float]]],
                    models: Mapping[str, object], clamp: bool = False) -> list[StandEstimate]:
    """Synthetic estimates per (stand, model).

    ``models`` maps a model label to either a fitted model or a mapping
    project -> model (the local models).  ``clamp`` limits log-log
    predictors to their modelling range.
    """
    out = []
    for stand in stands:
        pid = stand.als_project
        grid = grids[pid]
        cells = cell_metrics[pid]
        for label, m in models.items():
            model = m.get(pid) if isinstance(m, Mapping) else m
            if model is None:
                continue

            def predict_cell(cell, model=model):
                mv = cells.get(cell)
                if not mv:
                    raise DomainError(f"no metrics for cell {cell}")
                return predict_with(model, mv, pid, clamp)

            out.append(synthetic_stand_estimate(predict_cell, grid, stand, model=label))
    return out


# -- report tables ----------------------------------------------------------------


def plot_validation_table(blocks: Sequence[tuple[str, Sequence[Observation], np.ndarray]]):
    """Mixed-model families validated at local plots, one block per family."""
    out = []
    for label, targets, pred in blocks:
        obs = [o.response for o in targets]
        groups = [f"ALS project {o.group}" for o in targets]
        out.append((label, grouped_accuracy(obs, pred, groups, "plot", label, total="total")))
    return compare_models(out, layout="plot")


def stand_comparison_table(estimates: Sequence[StandEstimate], reference: str,
                           candidates: Sequence[tuple[str, str]]):
    """Paired comparison of synthetic estimates; ``reference`` plays the observed role."""
    ref = [e for e in estimates if e.model == reference]
    blocks = []
    for model_label, row_label in candidates:
        cand = [e for e in estimates if e.model == model_label]
        blocks.append((row_label, paired_stand_reports(ref, cand, row_label, total="All")))
    return compare_models(blocks, layout="stand_comparison")


def independent_table(plot_obs: Sequence[float], plot_stand: Sequence[str],
                      predictions: Sequence[tuple[str, np.ndarray]]):
    """Plot- and stand-level validation against an independent inventory.

    Stand-level observations are direct estimates (mean of the plot
    measurements in a stand) and predictions are the mean plot prediction.
    """
    y = np.asarray(plot_obs, dtype=float)
    stand_ids = np.asarray(plot_stand)
    ids = sorted(set(stand_ids.tolist()))
    y_stand = np.array([y[stand_ids == s].mean() for s in ids])
    blocks = []
    for label, pred in predictions:
        pred = np.asarray(pred, dtype=float)
        p_stand = np.array([pred[stand_ids == s].mean() for s in ids])
        blocks.append((label, [accuracy(y, pred, "plot", "total", label)]))
        blocks.append((label, [accuracy(y_stand, p_stand, "stand", "total", label)]))
    return compare_models(blocks, layout="independent")


def fmi_summary_rows(fmi: FmiFit, data: Sequence[Observation], cv: Mapping[str, np.ndarray]):
    """Per-project local model summary: predictors, coefficients, LOOCV accuracy."""
    rows = []
    for pid, model in fmi.models.items():
        obs = np.array([o.response for o in data if o.group == pid])
        rep = accuracy(obs, cv[pid], "plot", pid)
        rows.append((pid, model, rep))
    return rows
