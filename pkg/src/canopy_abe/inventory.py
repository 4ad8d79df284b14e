"""Field plot and tree records.

Tree volumes are inputs: single-tree volume models are applied upstream.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .errors import ParseError, UnsupportedAdjustmentError, ValidationError

SOURCES = ("NFI", "FMI", "VALIDATION")
DAYS_PER_YEAR = 365.25
PLOT_COLUMNS = ("plot_id", "source", "x", "y", "als_project", "stratum", "volume_ha", "date")
TREE_COLUMNS = ("plot_id", "dbh_cm", "species", "volume_m3", "volume_prev_m3", "years_between")


@dataclass(frozen=True)
class TreeRecord:
    plot_id: str
    dbh: float
    species: str
    volume: float
    volume_prev: float | None = None
    years_between: float | None = None

    def __post_init__(self):
        if not self.dbh > 0:
            raise ValidationError(f"tree on plot {self.plot_id}: dbh must be positive")
        if self.volume < 0:
            raise ValidationError(f"tree on plot {self.plot_id}: negative volume")
        if (self.volume_prev is None) != (self.years_between is None):
            raise ValidationError(
                f"tree on plot {self.plot_id}: volume_prev and years_between go together")
        if self.years_between is not None and not self.years_between > 0:
            raise ValidationError(f"tree on plot {self.plot_id}: years_between must be positive")


@dataclass(frozen=True)
class PlotRecord:
    plot_id: str
    source: str
    center_x: float
    center_y: float
    als_project: str
    stratum: str
    volume_ha: float
    measurement_date: dt.date

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValidationError(f"plot {self.plot_id}: unknown source {self.source!r}")
        if self.volume_ha < 0:
            raise ValidationError(f"plot {self.plot_id}: negative volume")


def harmonize_dbh(trees: Sequence[TreeRecord], threshold_cm: float) -> list[TreeRecord]:
    """Drop trees with dbh below the inclusion threshold (the threshold itself is kept)."""
    if threshold_cm < 0:
        raise ValidationError("dbh threshold must be non-negative")
    return [t for t in trees if not t.dbh < threshold_cm]


def years_between(start: dt.date, end: dt.date) -> float:
    return (end - start).days / DAYS_PER_YEAR


def temporal_adjust(tree: TreeRecord, measured: dt.date, target_date: dt.date) -> float:
    """Fore- or back-cast a tree volume with its mean yearly increment.

    The increment comes from the two latest measurements; results below zero
    are clamped to zero.
    """
    if tree.volume_prev is None or tree.years_between is None:
        raise UnsupportedAdjustmentError(
            f"tree on plot {tree.plot_id} has no previous measurement")
    increment = (tree.volume - tree.volume_prev) / tree.years_between
    delta = years_between(measured, target_date)
    if delta == 0:
        return tree.volume
    return max(0.0, tree.volume + increment * delta)


def adjust_trees(trees: Iterable[TreeRecord], measured: dt.date,
                 target_date: dt.date) -> list[TreeRecord]:
    return [replace(t, volume=temporal_adjust(t, measured, target_date)) for t in trees]


def plot_volume_ha(trees: Iterable[TreeRecord], plot_area_m2: float = 250.0) -> float:
    if not plot_area_m2 > 0:
        raise ValidationError("plot area must be positive")
    return sum(t.volume for t in trees) * 10000.0 / plot_area_m2


def filter_stratum(plots: Iterable[PlotRecord], stratum: str, project: str | None = None,
                   strata: Iterable[str] | None = None) -> list[PlotRecord]:
    """Plots of one stratum (and optionally one ALS project), in input order.

    ``strata`` is the declared stratum set; naming a stratum outside it is an
    error.
    """
    if strata is not None and stratum not in set(strata):
        raise ValidationError(f"unknown stratum {stratum!r}")
    return [p for p in plots
            if p.stratum == stratum and (project is None or p.als_project == project)]


# -- CSV ------------------------------------------------------------------


def _opt_float(s: str) -> float | None:
    s = s.strip()
    return float(s) if s else None


def read_plots_csv(path) -> list[PlotRecord]:
    plots = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(PLOT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ParseError(f"{path}: missing columns {sorted(missing)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                plots.append(PlotRecord(
                    plot_id=row["plot_id"], source=row["source"], center_x=float(row["x"]),
                    center_y=float(row["y"]), als_project=row["als_project"],
                    stratum=row["stratum"], volume_ha=float(row["volume_ha"]),
                    measurement_date=dt.date.fromisoformat(row["date"])))
            except (ValueError, TypeError) as exc:
                raise ParseError(f"{path}: {exc}", line=lineno) from None
    return plots


def write_plots_csv(plots: Iterable[PlotRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_COLUMNS)
        for p in plots:
            w.writerow([p.plot_id, p.source, repr(p.center_x), repr(p.center_y), p.als_project,
                        p.stratum, repr(p.volume_ha), p.measurement_date.isoformat()])


def read_trees_csv(path) -> list[TreeRecord]:
    trees = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(TREE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ParseError(f"{path}: missing columns {sorted(missing)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                trees.append(TreeRecord(
                    plot_id=row["plot_id"], dbh=float(row["dbh_cm"]), species=row["species"],
                    volume=float(row["volume_m3"]), volume_prev=_opt_float(row["volume_prev_m3"]),
                    years_between=_opt_float(row["years_between"])))
            except (ValueError, TypeError) as exc:
                raise ParseError(f"{path}: {exc}", line=lineno) from None
    return trees


def write_trees_csv(trees: Iterable[TreeRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TREE_COLUMNS)
        for t in trees:
            w.writerow([t.plot_id, repr(t.dbh), t.species, repr(t.volume),
                        "" if t.volume_prev is None else repr(t.volume_prev),
                        "" if t.years_between is None else repr(t.years_between)])
