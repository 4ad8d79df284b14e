"""Synthetic forests with known ground truth.

The world is a row of rectangular ALS project regions, each tiled into
rectangular stands.  Trees carry a cone-shaped crown; ALS pulses hit the
highest crown surface below them or fall through to the ground.  Each
project scales canopy echo heights by its own factor, which gives the
between-project slope differences the mixed model is meant to absorb.

All randomness flows from ``numpy.random.default_rng`` seeded with integers
derived from the configured seed.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import PLOT_AREA_M2, StandPolygon
from .inventory import PlotRecord, TreeRecord
from .pointcloud_io import PointCloud, Raster

TARGET_DATE = dt.date(2017, 7, 1)
MERCH_DBH_CM = 10.0
CHM_RESOLUTION = 0.5

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    seed: int = 1
    project_size: tuple[float, float] = (400.0, 400.0)
    n_projects: int = 3
    project_ids: tuple[str, ...] | None = None
    stand_density: float = 60.0           # stands per km^2
    stand_height: tuple[float, float] = (8.0, 30.0)
    mature_height: float = 14.0           # stands at least this tall are "mature_spruce"
    stem_density_a: float = 20000.0       # stems/ha = a * H**-b
    stem_density_b: float = 1.2
    understory_fraction: float = 0.25
    tree_height_cv: float = 0.12
    crown_radius_ratio: float = 0.15
    crown_length_ratio: float = 0.5
    form_factor: float = 0.45
    pulse_density: tuple[float, ...] = (5.0, 2.0, 2.0)
    canopy_hit_prob: float = 0.9
    second_echo_prob: float = 0.45
    echo_noise_sd: float = 0.1
    project_height_sd: float = 0.06
    project_bias_sd: float = 0.1
    terrain_relief: float = 40.0
    growth_rate: float = 0.03             # yearly volume increment as share of volume
    fmi_area_fraction: float = 0.5        # northern share of each project forming the FMI area
    fmi_site_factor: float = 1.3          # stem-density multiplier for stands in the FMI area

    def __post_init__(self):
        if self.n_projects < 2:
            raise ValidationError("need at least two ALS projects")
        if min(self.project_size) <= 0:
            raise ValidationError("degenerate project extent")
        if not 0.0 <= self.fmi_area_fraction <= 1.0:
            raise ValidationError("fmi_area_fraction must lie in [0, 1]")
        if self.stand_density <= 0 or self.stem_density_a <= 0 or self.fmi_site_factor <= 0:
            raise ValidationError("densities must be positive")
        if len(self.pulse_density) < self.n_projects:
            dens = tuple(self.pulse_density) + (self.pulse_density[-1],) * (
                self.n_projects - len(self.pulse_density))
            object.__setattr__(self, "pulse_density", dens)
        if any(d <= 0 for d in self.pulse_density):
            raise ValidationError("pulse densities must be positive")
        if self.project_ids is None:
            ids = tuple(chr(ord("A") + i) if i < 26 else f"P{i}" for i in range(self.n_projects))
            object.__setattr__(self, "project_ids", ids)
        elif len(self.project_ids) != self.n_projects:
            raise ValidationError("project_ids must list one id per project")

    @property
    def extent(self) -> tuple[float, float]:
        return self.project_size[0] * self.n_projects, self.project_size[1]


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


@dataclass(eq=False)
class Trees:
    x: np.ndarray
    y: np.ndarray
    height: np.ndarray
    dbh: np.ndarray
    volume: np.ndarray
    stand: np.ndarray

    def __len__(self):
        return len(self.x)


@dataclass(eq=False)
class World:
    config: SimConfig
    dtm: Raster
    stands: list[StandPolygon]
    stand_height: dict[str, float]
    trees: Trees
    true_volume: dict[str, float]
    project_regions: dict[str, tuple[float, float, float, float]]
    project_factor: dict[str, float] = field(default_factory=dict)
    project_bias: dict[str, float] = field(default_factory=dict)
    fmi_stands: frozenset = frozenset()

    def project_of(self, x: float, y: float) -> str | None:
        for pid, (x0, y0, x1, y1) in self.project_regions.items():
            if x0 <= x < x1 and y0 <= y < y1:
                return pid
        return None

    def stand_at(self, x, y) -> np.ndarray:
        """Index of the stand containing each point, -1 if none."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        out = np.full(x.shape, -1, dtype=np.int64)
        for i, s in enumerate(self.stands):
            x0, y0, x1, y1 = s.bounds()
            out[(out < 0) & (x >= x0) & (x < x1) & (y >= y0) & (y < y1)] = i
        return out


def _terrain(cfg: SimConfig, rng: np.random.Generator):
    w, h = cfg.extent
    k = 4
    amp = rng.uniform(0.2, 1.0, k) * cfg.terrain_relief / k
    fx = rng.uniform(0.5, 2.5, k) * 2 * math.pi / w
    fy = rng.uniform(0.5, 2.5, k) * 2 * math.pi / h
    ph = rng.uniform(0, 2 * math.pi, k)
    base = rng.uniform(150.0, 400.0)

    def f(x, y):
        x = np.asarray(x, dtype=float)[..., None]
        y = np.asarray(y, dtype=float)[..., None]
        return base + (amp * np.sin(fx * x + fy * y + ph)).sum(axis=-1)

    return f


def _split(rect, count, rng, out):
    x0, y0, x1, y1 = rect
    if count <= 1:
        out.append(rect)
        return
    frac = rng.uniform(0.35, 0.65)
    left = max(1, min(count - 1, int(round(count * frac))))
    frac = left / count
    if (x1 - x0) >= (y1 - y0):
        xm = round(x0 + (x1 - x0) * frac, 1)
        _split((x0, y0, xm, y1), left, rng, out)
        _split((xm, y0, x1, y1), count - left, rng, out)
    else:
        ym = round(y0 + (y1 - y0) * frac, 1)
        _split((x0, y0, x1, ym), left, rng, out)
        _split((x0, ym, x1, y1), count - left, rng, out)


def generate_world(config: SimConfig) -> World:
    cfg = config
    width, height = cfg.extent
    pw, ph = cfg.project_size
    terrain = _terrain(cfg, _rng(cfg.seed, 0))

    # DTM with a 3 m margin so every point inside the world has 4 neighbours
    margin = 3.0
    ncols = int(math.ceil(width + 2 * margin))
    nrows = int(math.ceil(height + 2 * margin))
    ox, oy = -margin, -margin
    xc = ox + 0.5 + np.arange(ncols)
    yc = oy + nrows - 0.5 - np.arange(nrows)
    dtm_vals = np.round(terrain(*np.meshgrid(xc, yc)), 3)
    dtm = Raster(ox, oy, 1.0, dtm_vals)

    stands: list[StandPolygon] = []
    stand_height: dict[str, float] = {}
    regions = {}
    fmi_stands: set[str] = set()
    rng = _rng(cfg.seed, 1)
    tx, ty, th, td, tv, ts = [], [], [], [], [], []
    for p, pid in enumerate(cfg.project_ids):
        region = (p * pw, 0.0, (p + 1) * pw, ph)
        regions[pid] = region
        count = max(1, int(round(cfg.stand_density * pw * ph / 1e6)))
        rects: list = []
        _split(region, count, rng, rects)
        fmi_y0 = ph * (1.0 - cfg.fmi_area_fraction)
        for r_i, (x0, y0, x1, y1) in enumerate(rects):
            sid = f"{pid}{r_i:03d}"
            hs = float(rng.uniform(*cfg.stand_height))
            stratum = "mature_spruce" if hs >= cfg.mature_height else "other"
            local = cfg.fmi_area_fraction > 0 and (y0 + y1) / 2 >= fmi_y0
            stands.append(StandPolygon(sid, np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]),
                                       stratum=stratum, als_project=pid, check_simple=False,
                                       local_inventory=local))
            stand_height[sid] = hs
            site = 1.0
            if local:
                fmi_stands.add(sid)
                site = cfg.fmi_site_factor
            area_ha = (x1 - x0) * (y1 - y0) / 1e4
            stems_ha = site * cfg.stem_density_a * hs ** -cfg.stem_density_b
            n_main = rng.poisson(stems_ha * area_ha)
            n_under = rng.poisson(cfg.understory_fraction * stems_ha * area_ha)
            n = n_main + n_under
            h = np.concatenate([hs * np.exp(rng.normal(0, cfg.tree_height_cv, n_main)),
                                hs * rng.uniform(0.25, 0.5, n_under)])
            dbh = np.maximum(1.25 * h * np.exp(rng.normal(0, 0.1, n)), 1.0)
            tx.append(rng.uniform(x0, x1, n))
            ty.append(rng.uniform(y0, y1, n))
            th.append(h)
            td.append(dbh)
            tv.append(cfg.form_factor * math.pi / 4 * (dbh / 100) ** 2 * h)
            ts.append(np.full(n, len(stands) - 1))
    trees = Trees(*(np.concatenate(a) for a in (tx, ty, th, td, tv)),
                  stand=np.concatenate(ts).astype(np.int64))
    merch = trees.dbh >= MERCH_DBH_CM
    true_volume = {}
    for i, s in enumerate(stands):
        sel = (trees.stand == i) & merch
        true_volume[s.id] = float(trees.volume[sel].sum() / (s.area / 1e4))

    prng = _rng(cfg.seed, 2)
    factor = {pid: float(1.0 + prng.normal(0, cfg.project_height_sd)) for pid in cfg.project_ids}
    bias = {pid: float(prng.normal(0, cfg.project_bias_sd)) for pid in cfg.project_ids}
    return World(cfg, dtm, stands, stand_height, trees, true_volume, regions, factor, bias,
                 frozenset(fmi_stands))


def canopy_height_model(world: World, region, resolution: float = CHM_RESOLUTION):
    """Raster of the highest crown surface (0 where no crown) over a region."""
    x0, y0, x1, y1 = region
    cfg = world.config
    nx = int(math.ceil((x1 - x0) / resolution))
    ny = int(math.ceil((y1 - y0) / resolution))
    chm = np.zeros((ny, nx))
    t = world.trees
    rmax = cfg.crown_radius_ratio * (t.height.max() if len(t) else 0.0)
    sel = np.flatnonzero((t.x >= x0 - rmax) & (t.x < x1 + rmax) & (t.y >= y0 - rmax) & (t.y < y1 + rmax))
    for i in sel:
        h = t.height[i]
        r = cfg.crown_radius_ratio * h
        cl = cfg.crown_length_ratio * h
        c0 = max(0, int((t.x[i] - r - x0) / resolution))
        c1 = min(nx, int((t.x[i] + r - x0) / resolution) + 1)
        r0 = max(0, int((t.y[i] - r - y0) / resolution))
        r1 = min(ny, int((t.y[i] + r - y0) / resolution) + 1)
        if c0 >= c1 or r0 >= r1:
            continue
        cx = x0 + (np.arange(c0, c1) + 0.5) * resolution
        cy = y0 + (np.arange(r0, r1) + 0.5) * resolution
        d = np.hypot(cx[None, :] - t.x[i], cy[:, None] - t.y[i])
        surf = np.where(d <= r, h - d / r * cl, 0.0)
        np.maximum(chm[r0:r1, c0:c1], surf, out=chm[r0:r1, c0:c1])
    return chm


def simulate_als(world: World, project_id: str, pulse_density: float | None = None,
                 seed: int | None = None) -> PointCloud:
    """Discrete-return ALS over one project region (elevations, not normalised)."""
    cfg = world.config
    if project_id not in world.project_regions:
        raise ValidationError(f"unknown project {project_id!r}")
    p_index = cfg.project_ids.index(project_id)
    if pulse_density is None:
        pulse_density = cfg.pulse_density[p_index]
    if not pulse_density > 0:
        raise ValidationError("pulse density must be positive")
    rng = _rng(cfg.seed if seed is None else seed, 3, p_index)
    x0, y0, x1, y1 = world.project_regions[project_id]
    n = rng.poisson(pulse_density * (x1 - x0) * (y1 - y0))
    px = rng.uniform(x0, x1, n)
    py = rng.uniform(y0, y1, n)
    chm = canopy_height_model(world, (x0, y0, x1, y1))
    ci = np.minimum(((px - x0) / CHM_RESOLUTION).astype(np.int64), chm.shape[1] - 1)
    ri = np.minimum(((py - y0) / CHM_RESOLUTION).astype(np.int64), chm.shape[0] - 1)
    canopy = chm[ri, ci]
    hit = (canopy > 0) & (rng.random(n) < cfg.canopy_hit_prob)
    second = hit & (rng.random(n) < cfg.second_echo_prob)
    factor = world.project_factor.get(project_id, 1.0)
    bias = world.project_bias.get(project_id, 0.0)
    noise1 = rng.normal(0, cfg.echo_noise_sd, n)
    noise2 = rng.normal(0, cfg.echo_noise_sd, n)
    first_h = np.where(hit, canopy * factor, 0.0) + noise1 + bias
    nret = np.where(second, 2, 1)
    # pulse-major order: first echo, then the optional ground echo
    xs = np.concatenate([px, px[second]])
    ys = np.concatenate([py, py[second]])
    hs = np.concatenate([first_h, noise2[second] + bias])
    rn = np.concatenate([np.ones(n, dtype=np.int64), np.full(int(second.sum()), 2)])
    nr = np.concatenate([nret, nret[second]])
    order = np.argsort(np.concatenate([np.arange(n), np.flatnonzero(second)]), kind="stable")
    xs, ys, hs, rn, nr = xs[order], ys[order], hs[order], rn[order], nr[order]
    ground = world.dtm.bilinear(xs, ys)
    return PointCloud(xs, ys, ground + hs, rn, nr, crs_id="synthetic")


# -- field plots ------------------------------------------------------------


def plot_trees(world: World, cx: float, cy: float, area: float = PLOT_AREA_M2) -> np.ndarray:
    r2 = area / math.pi
    t = world.trees
    return np.flatnonzero((t.x - cx) ** 2 + (t.y - cy) ** 2 <= r2)


def plot_volume(world: World, cx: float, cy: float, area: float = PLOT_AREA_M2) -> float:
    idx = plot_trees(world, cx, cy, area)
    idx = idx[world.trees.dbh[idx] >= MERCH_DBH_CM]
    return float(world.trees.volume[idx].sum() * 1e4 / area)


def _candidate_nodes(world, spacing, rng, region):
    x0, y0, x1, y1 = region
    ox = x0 + rng.uniform(0, spacing)
    oy = y0 + rng.uniform(0, spacing)
    xs = np.arange(ox, x1, spacing)
    ys = np.arange(oy, y1, spacing)
    gx, gy = np.meshgrid(xs, ys)
    return gx.ravel(), gy.ravel()


def sample_plots(world: World, design: str, n: int, seed: int, source: str = "FMI",
                 stratum: str | None = None, projects=None, stands=None,
                 spacing: float | None = None, prefix: str | None = None,
                 date: dt.date = TARGET_DATE, within=None) -> list[PlotRecord]:
    """Field plots with exact plot volumes (trees with dbh >= 10 cm).

    ``systematic_cluster`` lays 3 x 3 clusters (plot spacing ``spacing``,
    default 25 m) on a systematic grid with a seeded offset and keeps up to
    ``n`` plots per project.  ``random_grid`` samples ``n`` nodes of a
    ``spacing`` grid (default 20 m) without replacement, per project or,
    when ``stands`` is given, per stand.  Only plot circles lying wholly in
    the world and centred in a stand of ``stratum`` (if given) and in one
    of the ``within`` stand ids (if given) qualify.
    """
    if n <= 0:
        raise ValidationError("n must be positive")
    rng = _rng(seed, 4)
    r = math.sqrt(PLOT_AREA_M2 / math.pi)
    prefix = prefix or source
    projects = list(projects or world.config.project_ids)
    units = []
    if stands is not None:
        by_id = {s.id: s for s in world.stands}
        for sid in stands:
            s = by_id[sid]
            units.append((s.als_project, s.bounds(), sid))
    else:
        units = [(pid, world.project_regions[pid], None) for pid in projects]

    out: list[PlotRecord] = []
    for pid, region, sid in units:
        if design == "systematic_cluster":
            step = spacing or 25.0
            cluster_step = 4 * step
            cx, cy = _candidate_nodes(world, cluster_step, rng, region)
            offs = np.array([(i * step, j * step) for j in (-1, 0, 1) for i in (-1, 0, 1)])
            gx = (cx[:, None] + offs[None, :, 0]).ravel()
            gy = (cy[:, None] + offs[None, :, 1]).ravel()
        elif design == "random_grid":
            step = spacing or 20.0
            gx, gy = _candidate_nodes(world, step, rng, region)
        else:
            raise ValidationError(f"unknown plot design {design!r}")
        x0, y0, x1, y1 = world.project_regions[pid]
        ok = (gx - r >= x0) & (gx + r <= x1) & (gy - r >= y0) & (gy + r <= y1)
        st = world.stand_at(gx, gy)
        ok &= st >= 0
        if stratum is not None:
            ok &= np.array([st_i >= 0 and world.stands[st_i].stratum == stratum for st_i in st])
        if sid is not None:
            ok &= np.array([st_i >= 0 and world.stands[st_i].id == sid for st_i in st])
        if within is not None:
            ok &= np.array([st_i >= 0 and world.stands[st_i].id in within for st_i in st])
        idx = np.flatnonzero(ok)
        if idx.size == 0:
            log.warning("design %s yields no plot in %s", design, sid or pid)
            continue
        if design == "random_grid":
            if idx.size > n:
                idx = np.sort(rng.choice(idx, size=n, replace=False))
        else:
            idx = idx[:n]
        for k in idx:
            s = world.stands[st[k]]
            label = f"{prefix}-{sid or pid}-{len(out):04d}"
            out.append(PlotRecord(label, source, float(round(gx[k], 3)), float(round(gy[k], 3)), pid,
                                  s.stratum, plot_volume(world, round(gx[k], 3), round(gy[k], 3)), date))
    if not out:
        raise ValidationError(f"design {design} yields no plot in any unit")
    return out


def measured_trees(world: World, plot: PlotRecord, min_dbh: float, rng: np.random.Generator,
                   years_between: float = 5.0) -> list[TreeRecord]:
    """Tree list as recorded on the plot's measurement date.

    Volumes follow linear growth around the truth at :data:`TARGET_DATE`,
    so a linear fore/back-cast restores the true volume.
    """
    idx = plot_trees(world, plot.center_x, plot.center_y)
    idx = idx[world.trees.dbh[idx] >= min_dbh]
    delta = (plot.measurement_date - TARGET_DATE).days / 365.25
    out = []
    for i in idx:
        v = float(world.trees.volume[i])
        g = world.config.growth_rate * v
        now = v + g * delta
        out.append(TreeRecord(plot.plot_id, float(round(world.trees.dbh[i], 1)), "spruce",
                              now, now - g * years_between, years_between))
    return out


def random_dates(n: int, rng: np.random.Generator, years=(2014, 2018)) -> list[dt.date]:
    start = dt.date(years[0], 6, 1).toordinal()
    span = dt.date(years[1], 8, 31).toordinal() - start
    return [dt.date.fromordinal(start + int(k)) for k in rng.integers(0, span, n)]


def simulate_mixed_data(beta, sigma_b: float, sigma_eps: float, n_groups: int = 26,
                        n_per_group: int = 10, seed: int = 0, zmean_range=(4.0, 26.0),
                        density_range=(0.4, 1.0)):
    """Draw data straight from the random-slope model with the linear variance function.

    Returns a list of :class:`~canopy_abe.regression.Observation`; groups are
    labelled ``g00``, ``g01``, ...
    """
    from .regression import Observation

    beta = np.asarray(beta, dtype=float)
    rng = np.random.default_rng(seed)
    data = []
    for i in range(n_groups):
        b = rng.normal(0.0, sigma_b) if sigma_b > 0 else 0.0
        h = rng.uniform(*zmean_range, n_per_group)
        p = rng.uniform(*density_range, n_per_group)
        e = rng.normal(0.0, 1.0, n_per_group) * sigma_eps * np.sqrt(h)
        y = beta[0] + (beta[1] + b) * h + beta[2] * h * h + beta[3] * p + e
        for j in range(n_per_group):
            data.append(Observation(f"g{i:02d}-{j:02d}", float(y[j]),
                                    {"zmean_f": float(h[j]), "perc_n_2m": float(p[j])}, f"g{i:02d}"))
    return data
