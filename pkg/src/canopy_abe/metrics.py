"""Height and density metrics of normalised ALS returns.

Metric names follow ``<stat>[_2m]_<class>`` where the class is ``f`` (first
returns) or ``l`` (last returns), e.g. ``zp50_2m_l``; ``perc_n_2m`` uses all
returns.  Percentiles interpolate linearly between order statistics at rank
``1 + P/100 * (n - 1)``.  Density metric ``d<k>`` is the percentage of returns
strictly above ``zmin + (k - 1) * (zmax - zmin) / 10``.  A metric whose return
subset is empty (or degenerate) is left out of the result rather than set to
zero.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ValidationError
from .pointcloud_io import PointCloud

PERCENTILES = (5, 10, 20, 30, 40, 50, 60, 70, 80, 90, 95)
DENSITY_BINS = tuple(range(2, 11))
HEIGHT_STATS = ("zmean", "zsd") + tuple(f"zp{p:02d}" for p in PERCENTILES)
DENSITY_STATS = tuple(f"d{k}" for k in DENSITY_BINS)
RETURN_CLASSES = ("f", "l")
THRESHOLDS = ("", "_2m")
HEIGHT_CUTOFF = 2.0

MetricVector = dict  # metric name -> float; absent key means missing


def metric_names() -> list[str]:
    """Candidate metric names in their canonical order.

    Height metrics precede density metrics, first returns precede last
    returns and unthresholded variants precede ``_2m`` variants.
    ``perc_n_2m`` closes the list.
    """
    names = []
    for stats in (HEIGHT_STATS, DENSITY_STATS):
        for cls in RETURN_CLASSES:
            for thr in THRESHOLDS:
                names.extend(f"{s}{thr}_{cls}" for s in stats)
    names.append("perc_n_2m")
    return names


_NAME_INDEX = {n: i for i, n in enumerate(metric_names())}


def name_order(name: str) -> int:
    return _NAME_INDEX[name]


def percentile_sorted(xs: np.ndarray, p: float) -> float:
    """Linear interpolation between order statistics of a sorted array."""
    n = xs.shape[0]
    h = (p / 100.0) * (n - 1)
    lo = int(math.floor(h))
    if lo >= n - 1:
        return float(xs[n - 1])
    frac = h - lo
    return float(xs[lo] + frac * (xs[lo + 1] - xs[lo]))


def _height_family(h: np.ndarray, suffix: str, out: dict) -> None:
    n = h.shape[0]
    if n == 0:
        return
    xs = np.sort(h)
    out[f"zmean{suffix}"] = float(np.mean(h))
    if n >= 2:
        out[f"zsd{suffix}"] = float(np.std(h, ddof=1))
    for p in PERCENTILES:
        out[f"zp{p:02d}{suffix}"] = percentile_sorted(xs, p)
    zmin, zmax = xs[0], xs[-1]
    if zmax > zmin:
        step = (zmax - zmin) / 10.0
        for k in DENSITY_BINS:
            thr = zmin + (k - 1) * step
            out[f"d{k}{suffix}"] = 100.0 * float(np.count_nonzero(h > thr)) / n


def compute_metrics(cloud: PointCloud) -> MetricVector:
    if not cloud.normalized:
        raise ValidationError("metrics require a height-normalized point cloud")
    out: dict[str, float] = {}
    if len(cloud) == 0:
        return out
    h = cloud.z
    classes = {"f": cloud.return_number == 1,
               "l": cloud.return_number == cloud.num_returns}
    for cls in RETURN_CLASSES:
        hc = h[classes[cls]]
        _height_family(hc, f"_{cls}", out)
        _height_family(hc[hc > HEIGHT_CUTOFF], f"_2m_{cls}", out)
    out["perc_n_2m"] = 100.0 * float(np.count_nonzero(h > HEIGHT_CUTOFF)) / h.shape[0]
    return {k: out[k] for k in metric_names() if k in out}


def write_metric_csv(rows: Iterable[tuple[str, Mapping[str, float]]], path) -> None:
    """One row per unit; empty fields for missing metrics, ``repr`` floats."""
    names = metric_names()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + names)
        for uid, mv in rows:
            w.writerow([uid] + [repr(float(mv[n])) if n in mv else "" for n in names])


def read_metric_csv(path) -> dict[str, MetricVector]:
    out: dict[str, MetricVector] = {}
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            uid = row.pop("id")
            out[uid] = {k: float(v) for k, v in row.items() if v not in ("", None)}
    return out
