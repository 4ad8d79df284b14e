"""Accuracy measures, cross-validation and stand-level estimation.

Deviances are observed minus predicted, so over-prediction gives a negative
MD.  Percentages are relative to the observed mean.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import CanopyError, DomainError, ValidationError
from .geometry import GridSpec, StandPolygon, cells_in_stand, compactness
from .inventory import PlotRecord

log = logging.getLogger(__name__)

SKIP_FLAG_FRACTION = 0.10


@dataclass(frozen=True)
class AccuracyReport:
    n: int
    rmsd: float
    rmsd_pct: float
    md: float
    md_pct: float
    r2: float
    level: str = "plot"
    grouping: str = "total"
    label: str = ""


def accuracy(observed, predicted, level: str = "plot", grouping: str = "total",
             label: str = "") -> AccuracyReport:
    y = np.asarray(observed, dtype=float)
    yhat = np.asarray(predicted, dtype=float)
    if y.shape != yhat.shape or y.ndim != 1:
        raise ValidationError(f"length mismatch: {y.shape} observed vs {yhat.shape} predicted")
    n = y.shape[0]
    if n < 1:
        raise ValidationError("accuracy needs at least one pair")
    ybar = float(np.mean(y))
    if ybar == 0:
        raise ValidationError("observed mean is zero; percentage deviances undefined")
    dev = y - yhat
    rmsd = math.sqrt(float(np.mean(dev ** 2)))
    md = float(np.mean(dev))
    sst = float(np.sum((y - ybar) ** 2))
    if n >= 2 and sst > 0:
        r2 = 1.0 - float(np.sum(dev ** 2)) / sst
    else:
        r2 = float("nan")
    return AccuracyReport(n, rmsd, 100.0 * rmsd / ybar, md, 100.0 * md / ybar, r2,
                          level, grouping, label)


class FoldError(CanopyError):
    def __init__(self, fold: int, cause: Exception):
        self.fold = fold
        super().__init__(f"fold {fold} failed: {cause}")


def loocv(data: Sequence, fit: Callable[[list], object],
          predict: Callable[[object, object], float]) -> np.ndarray:
    """Leave-one-out predictions.

    ``fit`` is called on the n-1 remaining rows (in input order) and
    ``predict`` on the fitted model and the held-out row.  Whatever
    predictor selection ``fit`` closes over is reused for every fold.
    """
    n = len(data)
    if n < 3:
        raise ValidationError("leave-one-out needs at least 3 rows")
    out = np.empty(n)
    for i in range(n):
        train = [row for j, row in enumerate(data) if j != i]
        try:
            out[i] = predict(fit(train), data[i])
        except Exception as exc:
            raise FoldError(i, exc) from exc
    return out


@dataclass(frozen=True)
class StandEstimate:
    stand_id: str
    method: str
    value: float
    n_units: int
    skipped: int = 0
    flagged: bool = False
    model: str = ""
    als_project: str = ""


def synthetic_stand_estimate(predict_cell: Callable[[tuple[int, int]], float], grid: GridSpec,
                             stand: StandPolygon, model: str = "") -> StandEstimate:
    """Mean of the cell predictions over cells centred in the stand.

    Cells whose prediction raises :class:`DomainError` are skipped; the
    estimate is flagged when more than 10 % of the cells were skipped.
    """
    cells = cells_in_stand(grid, stand)
    if not cells:
        raise ValidationError(f"stand {stand.id}: no grid-cell centre inside")
    values = []
    skipped = 0
    for cell in cells:
        try:
            values.append(predict_cell(cell))
        except DomainError:
            skipped += 1
    if not values:
        raise ValidationError(f"stand {stand.id}: no usable cell among {len(cells)}")
    flagged = skipped > SKIP_FLAG_FRACTION * len(cells)
    return StandEstimate(stand.id, "synthetic_grid", float(np.mean(values)), len(values),
                         skipped, flagged, model, stand.als_project)


def direct_stand_estimate(plots: Sequence[PlotRecord], stand_id: str = "") -> StandEstimate:
    if not plots:
        raise ValidationError(f"stand {stand_id}: no plots for a direct estimate")
    vals = [p.volume_ha for p in plots]
    return StandEstimate(stand_id, "direct", float(np.mean(vals)), len(vals),
                         als_project=plots[0].als_project)


def select_stands(stands: Iterable[StandPolygon], per_project: int = 200, min_area_ha: float = 1.0,
                  min_compactness: float = 0.2, seed: int = 0) -> list[StandPolygon]:
    """Area/compactness filter, then a seeded sample without replacement per project.

    Projects are processed in sorted order with one generator, and the
    sampled stands keep their input order within a project.
    """
    by_project: dict[str, list[StandPolygon]] = {}
    for s in stands:
        if s.area / 10000.0 < min_area_ha or not compactness(s) > min_compactness:
            continue
        by_project.setdefault(s.als_project, []).append(s)
    rng = np.random.default_rng(seed)
    out = []
    for project in sorted(by_project):
        group = by_project[project]
        if len(group) > per_project:
            idx = np.sort(rng.choice(len(group), size=per_project, replace=False))
            group = [group[i] for i in idx]
        out.extend(group)
    return out


def augment_with_top_plots(nfi: Sequence, fmi: Sequence, k: int | None = 7,
                           zmean_of: Callable = None, project_of: Callable = None,
                           id_of: Callable = None) -> tuple[list, list]:
    """Append the ``k`` local plots with the largest zmean_f per ALS project.

    Works on :class:`~canopy_abe.regression.Observation` rows by default;
    the accessor callables adapt other record types.  ``k=None`` appends
    every local plot.  Returns the combined list and the appended rows.
    """
    zmean_of = zmean_of or (lambda r: r.metrics["zmean_f"])
    project_of = project_of or (lambda r: r.group)
    id_of = id_of or (lambda r: r.plot_id)
    if k is not None and k < 0:
        raise ValidationError("k must be non-negative")
    seen = {id_of(r) for r in nfi}
    by_project: dict[str, list] = {}
    for r in fmi:
        by_project.setdefault(project_of(r), []).append(r)
    added = []
    for project in sorted(by_project):
        rows = sorted(by_project[project], key=lambda r: (-zmean_of(r), id_of(r)))
        if k is not None:
            if k > len(rows):
                log.warning("project %s: only %d local plots for top-%d", project, len(rows), k)
            rows = rows[:k]
        for r in rows:
            if id_of(r) in seen:
                raise ValidationError(f"plot {id_of(r)} already in the modelling data")
            seen.add(id_of(r))
            added.append(r)
    return list(nfi) + added, added


# -- comparison tables ----------------------------------------------------


def grouped_accuracy(observed: Sequence[float], predicted: Sequence[float], groups: Sequence[str],
                     level: str = "plot", label: str = "", total: str = "total",
                     ) -> list[AccuracyReport]:
    """One report per group (sorted) followed by the pooled report."""
    y = np.asarray(observed, dtype=float)
    yhat = np.asarray(predicted, dtype=float)
    g = np.asarray(groups)
    out = [accuracy(y[g == k], yhat[g == k], level, str(k), label) for k in sorted(set(g.tolist()))]
    out.append(accuracy(y, yhat, level, total, label))
    return out


def paired_stand_reports(reference: Sequence[StandEstimate], candidate: Sequence[StandEstimate],
                         label: str = "", total: str = "All") -> list[AccuracyReport]:
    """Compare two sets of stand estimates; ``reference`` plays the observed role."""
    ref = {e.stand_id: e for e in reference}
    cand = {e.stand_id: e for e in candidate}
    if ref.keys() != cand.keys():
        diff = sorted(ref.keys() ^ cand.keys())
        raise ValidationError(f"stand sets differ: {diff[:5]}")
    ids = sorted(ref)
    return grouped_accuracy([ref[i].value for i in ids], [cand[i].value for i in ids],
                            [ref[i].als_project for i in ids], "stand", label, total)


TABLE_COLUMNS = {
    "plot": ("Modeling data", "ALS project", "RMSD", "RMSD%", "MD", "MD%", "R2"),
    "stand_comparison": ("Modeling data", "ALS project", "RMSD", "RMSD%", "MD", "MD%"),
    "independent": ("Level", "Model", "n", "RMSD", "RMSD%", "MD", "MD%", "R2"),
}


@dataclass
class ComparisonTable:
    layout: str
    reports: list[AccuracyReport] = field(default_factory=list)

    def rows(self, display: bool = False) -> list[list[str]]:
        def num(v, digits):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return "NA"
            return f"{v:.{digits}f}" if display else repr(float(v))

        def pct(v):
            if display:
                return "NA" if math.isnan(v) else str(int(round(v)))
            return repr(float(v))

        out = []
        for r in self.reports:
            if self.layout == "independent":
                out.append([r.level, r.label, str(r.n), num(r.rmsd, 0), pct(r.rmsd_pct),
                            num(r.md, 0), pct(r.md_pct), num(r.r2, 2)])
            else:
                row = [r.label, r.grouping, num(r.rmsd, 2), pct(r.rmsd_pct), num(r.md, 2),
                       pct(r.md_pct)]
                if self.layout == "plot":
                    row.append(num(r.r2, 2))
                out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS[self.layout])
        w.writerows(self.rows(display=False))
        return buf.getvalue()

    def to_text(self) -> str:
        header = list(TABLE_COLUMNS[self.layout])
        body = self.rows(display=True)
        widths = [max(len(str(c)) for c in col) for col in zip(header, *body)] if body else \
            [len(h) for h in header]
        lines = []
        key = None
        for row in [header] + body:
            # blank line between modelling-data / level blocks
            if row is not header and key is not None and row[0] != key:
                lines.append("")
            if row is not header:
                key = row[0]
            cells = [c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))]
            lines.append("  ".join(cells).rstrip())
            if row is header:
                lines.append("-" * len(lines[-1]))
        return "\n".join(lines) + "\n"


def compare_models(blocks: Sequence[tuple[str, Sequence[AccuracyReport]]],
                   layout: str = "plot") -> ComparisonTable:
    """Stack labelled report blocks into one table.

    Each block is ``(label, reports)``; the label replaces the reports' own
    label (modelling data for plot/stand layouts, model name for the
    independent-validation layout).
    """
    if layout not in TABLE_COLUMNS:
        raise ValidationError(f"unknown table layout {layout!r}")
    table = ComparisonTable(layout)
    keys = None
    for label, reports in blocks:
        block_keys = [(r.level, r.grouping) for r in reports]
        if layout != "independent":
            if keys is None:
                keys = block_keys
            elif block_keys != keys:
                raise ValidationError(f"block {label!r} has groupings {block_keys}, expected {keys}")
        for r in reports:
            table.reports.append(AccuracyReport(r.n, r.rmsd, r.rmsd_pct, r.md, r.md_pct, r.r2,
                                                r.level, r.grouping, label))
    if layout == "independent":
        table.reports.sort(key=lambda r: (0 if r.level == "plot" else 1))
    return table
