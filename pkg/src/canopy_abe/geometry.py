"""Plot circles, the prediction grid and stand polygons."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GeometryError, ValidationError
from .pointcloud_io import PointCloud

PLOT_AREA_M2 = 250.0
GRID_CELL_SIZE = 16.0


@dataclass(frozen=True)
class CirclePlot:
    id: str
    center_x: float
    center_y: float
    area: float = PLOT_AREA_M2

    def __post_init__(self):
        if not self.area > 0:
            raise ValidationError(f"plot {self.id}: area must be positive")

    @property
    def radius(self) -> float:
        return math.sqrt(self.area / math.pi)


def clip_to_plot(cloud: PointCloud, plot: CirclePlot) -> PointCloud:
    """Points within the plot circle, boundary included."""
    r = plot.radius
    d2 = (cloud.x - plot.center_x) ** 2 + (cloud.y - plot.center_y) ** 2
    return cloud.subset(d2 <= r * r)


@dataclass(frozen=True)
class GridSpec:
    origin_x: float
    origin_y: float
    ncols: int
    nrows: int
    cell_size: float = GRID_CELL_SIZE

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValidationError("grid cell_size must be positive")
        if self.ncols < 1 or self.nrows < 1:
            raise ValidationError("grid needs at least one row and column")

    @classmethod
    def covering(cls, xmin, ymin, xmax, ymax, cell_size: float = GRID_CELL_SIZE) -> "GridSpec":
        """Smallest grid snapped to multiples of ``cell_size`` whose half-open
        cells contain every point of the closed box."""
        ox = math.floor(xmin / cell_size) * cell_size
        oy = math.floor(ymin / cell_size) * cell_size
        ncols = max(1, math.floor((xmax - ox) / cell_size) + 1)
        nrows = max(1, math.floor((ymax - oy) / cell_size) + 1)
        return cls(ox, oy, ncols, nrows, cell_size)

    def cells(self):
        """All (col, row) indices in row-major order."""
        for row in range(self.nrows):
            for col in range(self.ncols):
                yield col, row

    def cell_center(self, col: int, row: int) -> tuple[float, float]:
        s = self.cell_size
        return self.origin_x + (col + 0.5) * s, self.origin_y + (row + 0.5) * s

    def cell_of(self, x, y):
        """Cell indices (col, row) of points; -1 where outside the grid."""
        col = np.floor((np.asarray(x, dtype=float) - self.origin_x) / self.cell_size).astype(np.int64)
        row = np.floor((np.asarray(y, dtype=float) - self.origin_y) / self.cell_size).astype(np.int64)
        inside = (col >= 0) & (col < self.ncols) & (row >= 0) & (row < self.nrows)
        return np.where(inside, col, -1), np.where(inside, row, -1)


def cell_polygon(grid: GridSpec, col: int, row: int) -> tuple[float, float, float, float]:
    """Half-open square ``[xmin, xmax) x [ymin, ymax)`` of a grid cell.

    Row indices grow northwards from ``origin_y``.
    """
    if not (0 <= col < grid.ncols and 0 <= row < grid.nrows):
        raise IndexError(f"cell ({col}, {row}) outside {grid.ncols}x{grid.nrows} grid")
    s = grid.cell_size
    x0 = grid.origin_x + col * s
    y0 = grid.origin_y + row * s
    return x0, y0, x0 + s, y0 + s


def _close(ring) -> np.ndarray:
    a = np.asarray(ring, dtype=float)
    if a.ndim != 2 or a.shape[1] != 2 or len(a) < 3:
        raise GeometryError("ring needs at least three 2-D vertices")
    if not np.array_equal(a[0], a[-1]):
        a = np.vstack([a, a[:1]])
    return a


def ring_signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def ring_perimeter(ring: np.ndarray) -> float:
    return float(np.hypot(*np.diff(ring, axis=0).T).sum())


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = float((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        return int(v > 0) - int(v < 0)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    return ((o1 == 0 and on_seg(p1, p2, p3)) or (o2 == 0 and on_seg(p1, p2, p4))
            or (o3 == 0 and on_seg(p3, p4, p1)) or (o4 == 0 and on_seg(p3, p4, p2)))


def is_simple(ring: np.ndarray) -> bool:
    """Pairwise check of non-adjacent edges; quadratic, fine for stand outlines."""
    n = len(ring) - 1
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(ring[i], ring[i + 1], ring[j], ring[j + 1]):
                return False
    return True


@dataclass(frozen=True, eq=False)
class StandPolygon:
    id: str
    outer: np.ndarray
    holes: tuple = field(default_factory=tuple)
    stratum: str = ""
    als_project: str = ""
    check_simple: bool = field(default=True, repr=False)
    local_inventory: bool = False         # stand lies in an area covered by local (FMI) plots

    def __post_init__(self):
        outer = _close(self.outer)
        holes = tuple(_close(h) for h in self.holes)
        for r in (outer,) + holes:
            r.setflags(write=False)
        object.__setattr__(self, "outer", outer)
        object.__setattr__(self, "holes", holes)
        if self.check_simple and not is_simple(outer):
            raise GeometryError(f"stand {self.id}: outer ring self-intersects")
        if not self.area > 0:
            raise GeometryError(f"stand {self.id}: zero area")

    @property
    def rings(self) -> tuple:
        return (self.outer,) + self.holes

    @property
    def area(self) -> float:
        """Shoelace area of the outer ring minus its holes, m^2."""
        return abs(ring_signed_area(self.outer)) - sum(abs(ring_signed_area(h)) for h in self.holes)

    @property
    def perimeter(self) -> float:
        return sum(ring_perimeter(r) for r in self.rings)

    def bounds(self) -> tuple[float, float, float, float]:
        return (float(self.outer[:, 0].min()), float(self.outer[:, 1].min()),
                float(self.outer[:, 0].max()), float(self.outer[:, 1].max()))

    def contains(self, x, y) -> np.ndarray:
        return points_in_polygon(x, y, self.rings)


def points_in_polygon(x, y, rings) -> np.ndarray:
    """Even-odd test over all rings; points on any edge count as inside."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    inside = np.zeros(x.shape, dtype=bool)
    edge = np.zeros(x.shape, dtype=bool)
    for ring in rings:
        for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
            # boundary: collinear and within the segment's bounding box
            cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
            within = ((np.minimum(x1, x2) <= x) & (x <= np.maximum(x1, x2))
                      & (np.minimum(y1, y2) <= y) & (y <= np.maximum(y1, y2)))
            edge |= (cross == 0) & within
            straddles = (y1 > y) != (y2 > y)
            if not straddles.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                x_at = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= straddles & (x < x_at)
    return inside | edge


def cells_in_stand(grid: GridSpec, stand: StandPolygon) -> list[tuple[int, int]]:
    """Grid cells whose centre lies in the stand, in row-major order."""
    xmin, ymin, xmax, ymax = stand.bounds()
    s = grid.cell_size
    c0 = max(0, math.floor((xmin - grid.origin_x) / s - 0.5))
    c1 = min(grid.ncols - 1, math.ceil((xmax - grid.origin_x) / s - 0.5))
    r0 = max(0, math.floor((ymin - grid.origin_y) / s - 0.5))
    r1 = min(grid.nrows - 1, math.ceil((ymax - grid.origin_y) / s - 0.5))
    if c1 < c0 or r1 < r0:
        return []
    cols, rows = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
    cols, rows = cols.ravel(), rows.ravel()
    cx = grid.origin_x + (cols + 0.5) * s
    cy = grid.origin_y + (rows + 0.5) * s
    hit = stand.contains(cx, cy)
    return [(int(c), int(r)) for c, r in zip(cols[hit], rows[hit])]


def compactness(stand: StandPolygon) -> float:
    """sqrt(area) / perimeter; at most 1/(2*sqrt(pi)) for any shape."""
    area = stand.area
    if not area > 0:
        raise GeometryError(f"stand {stand.id}: degenerate polygon")
    return math.sqrt(area) / stand.perimeter


# -- GeoJSON --------------------------------------------------------------


def read_stands_geojson(path) -> list[StandPolygon]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("type") != "FeatureCollection":
        raise ValidationError(f"{path}: expected a GeoJSON FeatureCollection")
    stands = []
    for i, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        if geom.get("type") != "Polygon":
            raise ValidationError(
                f"{path}: feature {i} has geometry {geom.get('type')!r}; only Polygon stands are supported")
        rings = geom["coordinates"]
        stands.append(StandPolygon(
            id=str(props.get("id", i)), outer=np.asarray(rings[0], dtype=float),
            holes=tuple(np.asarray(r, dtype=float) for r in rings[1:]),
            stratum=str(props.get("stratum", "")), als_project=str(props.get("als_project", "")),
            local_inventory=bool(props.get("local_inventory", False))))
    return stands


def write_stands_geojson(stands, path) -> None:
    feats = []
    for s in stands:
        feats.append({
            "type": "Feature",
            "properties": {"id": s.id, "stratum": s.stratum, "als_project": s.als_project,
                           "local_inventory": s.local_inventory},
            "geometry": {"type": "Polygon", "coordinates": [r.tolist() for r in s.rings]},
        })
    doc = {"type": "FeatureCollection", "features": feats}
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")
