"""ALS point and terrain raster I/O, and height normalisation.

Point clouds are held column-wise in numpy arrays.  Terrain rasters follow
the Arc/Info ASCII grid convention: the header gives the lower-left corner
of the grid, values are stored north-up (row 0 is the northern edge) and a
cell value is the elevation at the cell centre.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import LasFormatError, ParseError, TruncatedFileError, ValidationError

POINT_COLUMNS = ("x", "y", "z", "return_number", "num_returns")
TEXT_DECIMALS = 3


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    z: float
    return_number: int
    num_returns: int

    def __post_init__(self):
        if not 1 <= self.return_number <= self.num_returns:
            raise ValidationError(
                f"return_number {self.return_number} outside 1..{self.num_returns}"
            )


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable column store of ALS returns.

    ``z`` is the return elevation, or the height above ground once
    ``normalized`` is set.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    return_number: np.ndarray
    num_returns: np.ndarray
    crs_id: str = ""
    normalized: bool = False

    def __post_init__(self):
        for name, dtype in zip(POINT_COLUMNS, (float, float, float, np.int64, np.int64)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))
        n = len(self.x)
        if any(len(getattr(self, c)) != n for c in POINT_COLUMNS):
            raise ValidationError("point columns differ in length")
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all() and np.isfinite(self.z).all()):
            raise ValidationError("non-finite coordinate")
        bad = np.flatnonzero((self.return_number < 1) | (self.return_number > self.num_returns))
        if bad.size:
            i = int(bad[0])
            raise ValidationError(
                f"point {i}: return_number {self.return_number[i]} "
                f"outside 1..{self.num_returns[i]}"
            )

    def __len__(self) -> int:
        return len(self.x)

    def __iter__(self) -> Iterator[Point]:
        for i in range(len(self)):
            yield Point(float(self.x[i]), float(self.y[i]), float(self.z[i]),
                        int(self.return_number[i]), int(self.num_returns[i]))

    @classmethod
    def empty(cls, crs_id: str = "", normalized: bool = False) -> "PointCloud":
        return cls([], [], [], [], [], crs_id=crs_id, normalized=normalized)

    @classmethod
    def from_points(cls, points, crs_id: str = "", normalized: bool = False) -> "PointCloud":
        points = list(points)
        cols = [[getattr(p, c) for p in points] for c in POINT_COLUMNS]
        return cls(*cols, crs_id=crs_id, normalized=normalized)

    def subset(self, mask) -> "PointCloud":
        return PointCloud(self.x[mask], self.y[mask], self.z[mask],
                          self.return_number[mask], self.num_returns[mask],
                          crs_id=self.crs_id, normalized=self.normalized)

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud.empty()
        if len({c.normalized for c in clouds}) > 1 or len({c.crs_id for c in clouds}) > 1:
            raise ValidationError("cannot concatenate clouds with different CRS or normalisation")
        cols = [np.concatenate([getattr(c, name) for c in clouds]) for name in POINT_COLUMNS]
        return PointCloud(*cols, crs_id=clouds[0].crs_id, normalized=clouds[0].normalized)


@dataclass(frozen=True, eq=False)
class Raster:
    """North-up grid; (origin_x, origin_y) is the lower-left grid corner."""

    origin_x: float
    origin_y: float
    cell_size: float
    values: np.ndarray
    nodata: float = -9999.0

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2 or values.size == 0:
            raise ValidationError("raster values must be a non-empty 2-D grid")
        if not self.cell_size > 0:
            raise ValidationError("cell_size must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    def center(self, row: int, col: int) -> tuple[float, float]:
        s = self.cell_size
        return (self.origin_x + (col + 0.5) * s,
                self.origin_y + (self.nrows - row - 0.5) * s)

    def bilinear(self, x, y) -> np.ndarray:
        """Interpolate between the four surrounding cell centres.

        Returns NaN where a point is outside the hull of cell centres or any
        of the four neighbours is nodata.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        s = self.cell_size
        # column index grows east, "up" index grows north from the bottom row
        fc = (x - self.origin_x) / s - 0.5
        fu = (y - self.origin_y) / s - 0.5
        c0 = np.floor(fc).astype(np.int64)
        u0 = np.floor(fu).astype(np.int64)
        # a query exactly on the last centre line uses the cell pair below it
        c0 = np.where((fc == self.ncols - 1) & (self.ncols > 1), c0 - 1, c0)
        u0 = np.where((fu == self.nrows - 1) & (self.nrows > 1), u0 - 1, u0)
        tc = fc - c0
        tu = fu - u0
        c1 = np.minimum(c0 + 1, self.ncols - 1)
        u1 = np.minimum(u0 + 1, self.nrows - 1)
        ok = (c0 >= 0) & (u0 >= 0) & (fc <= self.ncols - 1) & (fu <= self.nrows - 1)
        out = np.full(x.shape, np.nan)
        if not ok.any():
            return out
        c0o, c1o, u0o, u1o = c0[ok], c1[ok], u0[ok], u1[ok]
        tco, tuo = tc[ok], tu[ok]
        r0 = self.nrows - 1 - u0o
        r1 = self.nrows - 1 - u1o
        v00 = self.values[r0, c0o]
        v10 = self.values[r0, c1o]
        v01 = self.values[r1, c0o]
        v11 = self.values[r1, c1o]
        good = ~((v00 == self.nodata) | (v10 == self.nodata)
                 | (v01 == self.nodata) | (v11 == self.nodata))
        # weights form is exact at both ends of each interval
        south = v00 * (1.0 - tco) + v10 * tco
        north = v01 * (1.0 - tco) + v11 * tco
        z = south * (1.0 - tuo) + north * tuo
        out[ok] = np.where(good, z, np.nan)
        return out


@dataclass(frozen=True)
class NormalizeReport:
    rejected: tuple[int, ...] = field(default_factory=tuple)

    @property
    def count(self) -> int:
        return len(self.rejected)


def normalize_heights(cloud: PointCloud, dtm: Raster) -> tuple[PointCloud, NormalizeReport]:
    """Subtract bilinearly interpolated terrain elevation from each return.

    Points outside the DTM or next to nodata cells are dropped; their input
    indices are listed in the report.  Negative heights are kept.
    """
    if cloud.normalized:
        raise ValidationError("point cloud is already normalized")
    ground = dtm.bilinear(cloud.x, cloud.y) if len(cloud) else np.empty(0)
    keep = np.isfinite(ground)
    rejected = tuple(int(i) for i in np.flatnonzero(~keep))
    out = PointCloud(cloud.x[keep], cloud.y[keep], cloud.z[keep] - ground[keep],
                     cloud.return_number[keep], cloud.num_returns[keep],
                     crs_id=cloud.crs_id, normalized=True)
    return out, NormalizeReport(rejected)


# -- delimited text -------------------------------------------------------


def _read_point_text_fast(path, schema, crs_id) -> PointCloud | None:
    """Vectorised read of a well-formed file; None when anything is off."""
    with open(path, encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().rstrip("\r\n").split(",")]
        try:
            idx = [header.index(schema[c]) for c in POINT_COLUMNS]
        except ValueError:
            return None
        body = fh.read()
    if not body.strip():
        return None
    try:
        a = np.loadtxt(io.StringIO(body), delimiter=",", usecols=idx, ndmin=2, dtype=float)
    except ValueError:
        return None
    if a.shape[0] == 0 or not np.isfinite(a).all():
        return None
    rn, nr = a[:, 3], a[:, 4]
    if not (np.all(rn == np.round(rn)) and np.all(nr == np.round(nr))
            and np.all((rn >= 1) & (rn <= nr))):
        return None
    return PointCloud(a[:, 0], a[:, 1], a[:, 2], rn.astype(np.int64), nr.astype(np.int64),
                      crs_id=crs_id, normalized=False)


def read_point_text(path, schema: Mapping[str, str] | None = None, crs_id: str = "") -> PointCloud:
    """Read a comma-delimited point file with a header row.

    ``schema`` maps the canonical column names (x, y, z, return_number,
    num_returns) to the header names used in the file.
    """
    schema = {c: c for c in POINT_COLUMNS} | dict(schema or {})
    fast = _read_point_text_fast(path, schema, crs_id)
    if fast is not None:
        return fast
    # row-wise parse, which reports the offending line
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("missing header row", line=1) from None
        try:
            idx = [header.index(schema[c]) for c in POINT_COLUMNS]
        except ValueError as exc:
            raise ParseError(f"header lacks a required column ({exc})", line=1) from None
        cols: list[list] = [[] for _ in POINT_COLUMNS]
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                vals = [row[i] for i in idx]
                x, y, z = float(vals[0]), float(vals[1]), float(vals[2])
                rn, nr = int(vals[3]), int(vals[4])
            except (IndexError, ValueError) as exc:
                raise ParseError(f"malformed row: {exc}", line=lineno) from None
            if not 1 <= rn <= nr:
                raise ValidationError(f"line {lineno}: return_number {rn} outside 1..{nr}")
            for col, v in zip(cols, (x, y, z, rn, nr)):
                col.append(v)
    return PointCloud(*cols, crs_id=crs_id, normalized=False)


def write_point_text(cloud: PointCloud, path) -> None:
    buf = io.StringIO()
    buf.write(",".join(POINT_COLUMNS) + "\n")
    if len(cloud):
        xyz = np.column_stack([cloud.x, cloud.y, cloud.z])
        ret = np.column_stack([cloud.return_number, cloud.num_returns])
        lines = [f"{a:.3f},{b:.3f},{c:.3f},{r},{n}\n" for (a, b, c), (r, n) in
                 zip(xyz.tolist(), ret.tolist())]
        buf.writelines(lines)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# -- LAS 1.2 --------------------------------------------------------------

# public header block of LAS 1.2, 227 bytes
_LAS_HEADER = struct.Struct("<4sHH16sBB32s32sHHHLLBHL5L12d")
_POINT_DTYPES = {
    0: np.dtype([("X", "<i4"), ("Y", "<i4"), ("Z", "<i4"), ("intensity", "<u2"),
                 ("flags", "u1"), ("classification", "u1"), ("scan_angle", "i1"),
                 ("user_data", "u1"), ("source_id", "<u2")]),
}
_POINT_DTYPES[1] = np.dtype(_POINT_DTYPES[0].descr + [("gps_time", "<f8")])


@dataclass(frozen=True)
class LasHeader:
    version: tuple[int, int]
    point_format: int
    record_length: int
    offset_to_points: int
    point_count: int
    scale: tuple[float, float, float]
    offset: tuple[float, float, float]


def read_las_header(data: bytes) -> LasHeader:
    if len(data) < _LAS_HEADER.size or data[:4] != b"LASF":
        raise LasFormatError("not a LAS file (bad magic)")
    f = _LAS_HEADER.unpack_from(data)
    version = (f[4], f[5])
    if version[0] != 1 or version[1] > 2:
        raise LasFormatError(f"unsupported LAS version {version[0]}.{version[1]}")
    fmt = f[13]
    if fmt not in _POINT_DTYPES:
        raise LasFormatError(f"unsupported point data record format {fmt}")
    return LasHeader(version=version, point_format=fmt, record_length=f[14],
                     offset_to_points=f[11], point_count=f[15],
                     scale=tuple(f[21:24]), offset=tuple(f[24:27]))


def read_las_subset(path, crs_id: str = "") -> PointCloud:
    """Read x/y/z and return numbering from an uncompressed LAS 1.2 file."""
    data = Path(path).read_bytes()
    hdr = read_las_header(data)
    dtype = _POINT_DTYPES[hdr.point_format]
    if hdr.record_length < dtype.itemsize:
        raise LasFormatError(f"record length {hdr.record_length} too short for format {hdr.point_format}")
    available = max(0, len(data) - hdr.offset_to_points) // hdr.record_length
    if available < hdr.point_count:
        raise TruncatedFileError(
            f"header declares {hdr.point_count} points, file holds {available}")
    if hdr.record_length == dtype.itemsize:
        rec = np.frombuffer(data, dtype=dtype, count=hdr.point_count, offset=hdr.offset_to_points)
    else:
        padded = np.dtype({"names": dtype.names,
                           "formats": [dtype.fields[n][0] for n in dtype.names],
                           "offsets": [dtype.fields[n][1] for n in dtype.names],
                           "itemsize": hdr.record_length})
        rec = np.frombuffer(data, dtype=padded, count=hdr.point_count, offset=hdr.offset_to_points)
    sx, sy, sz = hdr.scale
    ox, oy, oz = hdr.offset
    flags = rec["flags"].astype(np.int64)
    return PointCloud(rec["X"] * sx + ox, rec["Y"] * sy + oy, rec["Z"] * sz + oz,
                      flags & 0b111, (flags >> 3) & 0b111, crs_id=crs_id)


def write_las(cloud: PointCloud, path, scale=(0.01, 0.01, 0.01), offset=(0.0, 0.0, 0.0),
              point_format: int = 0) -> None:
    """Write a minimal LAS 1.2 file (no VLRs)."""
    dtype = _POINT_DTYPES[point_format]
    n = len(cloud)
    rec = np.zeros(n, dtype=dtype)
    for axis, col, s, o in zip("XYZ", (cloud.x, cloud.y, cloud.z), scale, offset):
        rec[axis] = np.round((col - o) / s).astype(np.int32)
    rec["flags"] = (cloud.return_number & 0b111) | ((cloud.num_returns & 0b111) << 3)
    by_return = [int(np.sum(cloud.return_number == k)) for k in range(1, 6)]
    if n:
        bounds = (cloud.x.max(), cloud.x.min(), cloud.y.max(), cloud.y.min(),
                  cloud.z.max(), cloud.z.min())
    else:
        bounds = (0.0,) * 6
    header = _LAS_HEADER.pack(b"LASF", 0, 0, bytes(16), 1, 2, b"canopy-abe".ljust(32, b"\0"),
                              b"canopy-abe".ljust(32, b"\0"), 1, 2000, _LAS_HEADER.size,
                              _LAS_HEADER.size, 0, point_format, dtype.itemsize, n,
                              *by_return, *scale, *offset, *bounds)
    Path(path).write_bytes(header + rec.tobytes())


# -- ASCII grid -----------------------------------------------------------

_GRID_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def read_ascii_grid(path) -> Raster:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    meta = {}
    for lineno, line in enumerate(lines[:6], start=1):
        parts = line.split()
        if len(parts) != 2 or parts[0].lower() not in _GRID_KEYS:
            raise ParseError(f"bad ASCII grid header entry {line!r}", line=lineno)
        meta[parts[0].lower()] = parts[1]
    missing = set(_GRID_KEYS) - meta.keys()
    if missing:
        raise ParseError(f"ASCII grid header lacks {sorted(missing)}", line=1)
    ncols, nrows = int(meta["ncols"]), int(meta["nrows"])
    try:
        values = np.array(" ".join(lines[6:]).split(), dtype=float)
    except ValueError as exc:
        raise ParseError(f"bad grid value: {exc}") from None
    if values.size != ncols * nrows:
        raise ParseError(f"grid has {values.size} values, header implies {ncols * nrows}")
    return Raster(float(meta["xllcorner"]), float(meta["yllcorner"]), float(meta["cellsize"]),
                  values.reshape(nrows, ncols), float(meta["nodata_value"]))


def write_ascii_grid(raster: Raster, path, decimals: int = 3) -> None:
    head = (f"ncols {raster.ncols}\nnrows {raster.nrows}\nxllcorner {raster.origin_x!r}\n"
            f"yllcorner {raster.origin_y!r}\ncellsize {raster.cell_size!r}\n"
            f"NODATA_value {raster.nodata!r}\n")
    rows = [" ".join(f"{v:.{decimals}f}" for v in row) for row in raster.values.tolist()]
    Path(path).write_text(head + "\n".join(rows) + "\n", encoding="utf-8")
