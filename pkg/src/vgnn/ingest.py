"""Trip-record parsing, grid assignment and hourly demand binning."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

log = logging.getLogger(__name__)

OUT_OF_BOUNDS = -1
# Tolerance (in cell units) for snapping coordinates that sit on a cell edge
# but land a hair below it after float subtraction.
_EDGE_SNAP = 1e-9

NYC_BOUNDS = (40.628, 40.830, -74.05, -73.88)


class IngestError(RuntimeError):
    pass


@dataclass(frozen=True)
class TripRecord:
    pickup_time: float
    pickup_lat: float
    pickup_lon: float
    dropoff_lat: float | None = None
    dropoff_lon: float | None = None

    @property
    def has_dropoff(self) -> bool:
        return self.dropoff_lat is not None and self.dropoff_lon is not None


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    rows: int
    cols: int

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ValueError(f"degenerate bounds in {self}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"rows and cols must be positive, got {self.rows}x{self.cols}")

    @classmethod
    def nyc(cls, rows: int = 40, cols: int = 30) -> "GridSpec":
        return cls(*NYC_BOUNDS, rows, cols)

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def dlat(self) -> float:
        return (self.lat_max - self.lat_min) / self.rows

    @property
    def dlon(self) -> float:
        return (self.lon_max - self.lon_min) / self.cols

    def row_col(self, cell: int) -> tuple[int, int]:
        return divmod(int(cell), self.cols)

    def cell_center(self, cell: int) -> tuple[float, float]:
        r, c = self.row_col(cell)
        return self.lat_min + (r + 0.5) * self.dlat, self.lon_min + (c + 0.5) * self.dlon

    def to_dict(self) -> dict:
        return {"lat_min": self.lat_min, "lat_max": self.lat_max, "lon_min": self.lon_min,
                "lon_max": self.lon_max, "rows": self.rows, "cols": self.cols}


@dataclass(frozen=True)
class DemandTensor:
    """Pickup counts, shape ``(T, U)``: time slots by spatial units."""

    values: np.ndarray
    bin_width: int
    t0: float
    grid: GridSpec | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"demand must be a non-empty T x U matrix, got shape {v.shape}")
        if (v < 0).any():
            raise ValueError("demand counts must be nonnegative")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_slots(self) -> int:
        return self.values.shape[0]

    @property
    def n_units(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ODTensor:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"OD matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise ValueError("OD counts must be nonnegative")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)


@dataclass
class ParseStats:
    rows: int = 0
    malformed: int = 0
    out_of_bounds: int = 0
    out_of_window: int = 0


@dataclass
class Schema:
    """Column mapping for delimiter-separated trip files.

    Columns may be given as 0-based integers or header names.
    """

    time: int | str
    lat: int | str
    lon: int | str
    dropoff_lat: int | str | None = None
    dropoff_lon: int | str | None = None
    delimiter: str = ","
    header: bool = True
    time_format: str | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, m: dict) -> "Schema":
        known = {"time", "lat", "lon", "dropoff_lat", "dropoff_lon", "delimiter",
                 "header", "time_format"}
        unknown = set(m) - known
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**m)

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        return cls.from_mapping(json.loads(Path(path).read_text()))


UBER_2014 = Schema(time=0, lat=1, lon=2)


def parse_time(text: str, fmt: str | None = None) -> float:
    """Timestamp string (or epoch seconds) to UTC epoch seconds; naive times are taken as UTC."""
    text = text.strip()
    if fmt:
        dt = datetime.strptime(text, fmt)
    else:
        try:
            return float(text)
        except ValueError:
            pass
        try:
            dt = datetime.fromisoformat(text)
        except ValueError:
            dt = datetime.strptime(text, "%m/%d/%Y %H:%M:%S")
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _coord(text: str) -> float:
    x = float(text)
    if not math.isfinite(x):
        raise ValueError("non-finite coordinate")
    return x


def parse_trips(path: str | Path, schema: Schema, stats: ParseStats | None = None,
                max_malformed_frac: float = 0.5) -> Iterator[TripRecord]:
    """Yield one :class:`TripRecord` per valid row; bad rows are counted in ``stats``.

    Raises :class:`IngestError` when the file cannot be read or when more
    than half of the rows are malformed (checked once the file is exhausted).
    """
    stats = stats if stats is not None else ParseStats()
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        cols = [schema.time, schema.lat, schema.lon, schema.dropoff_lat, schema.dropoff_lon]
        if schema.header:
            header = next(reader, None)
            if header is None:
                log.warning("%s is empty", path)
                return
            names = {name.strip(): i for i, name in enumerate(header)}
            try:
                cols = [names[c] if isinstance(c, str) else c for c in cols]
            except KeyError as exc:
                raise IngestError(f"{path}: column {exc} not in header") from None
        t_i, la_i, lo_i, dla_i, dlo_i = cols
        for row in reader:
            if not row:
                continue
            stats.rows += 1
            try:
                rec = TripRecord(
                    parse_time(row[t_i], schema.time_format),
                    _coord(row[la_i]),
                    _coord(row[lo_i]),
                    _coord(row[dla_i]) if dla_i is not None else None,
                    _coord(row[dlo_i]) if dlo_i is not None else None,
                )
            except (ValueError, IndexError):
                stats.malformed += 1
                continue
            yield rec
    if stats.rows == 0:
        log.warning("%s has no data rows", path)
    elif stats.malformed > max_malformed_frac * stats.rows:
        raise IngestError(
            f"{path}: {stats.malformed} of {stats.rows} rows malformed")


def assign_cell(spec: GridSpec, lat: float, lon: float) -> int:
    """Row-major cell index of a point, or ``OUT_OF_BOUNDS``.

    The closed box is covered: points on the upper edges go to the last row/column.
    """
    if not (spec.lat_min <= lat <= spec.lat_max and spec.lon_min <= lon <= spec.lon_max):
        return OUT_OF_BOUNDS
    row = min(int(math.floor((lat - spec.lat_min) / spec.dlat + _EDGE_SNAP)), spec.rows - 1)
    col = min(int(math.floor((lon - spec.lon_min) / spec.dlon + _EDGE_SNAP)), spec.cols - 1)
    return row * spec.cols + col


def assign_cells(spec: GridSpec, lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    """Vectorized :func:`assign_cell`."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    inside = ((lat >= spec.lat_min) & (lat <= spec.lat_max)
              & (lon >= spec.lon_min) & (lon <= spec.lon_max))
    with np.errstate(invalid="ignore"):
        row = np.minimum(np.floor((lat - spec.lat_min) / spec.dlat + _EDGE_SNAP), spec.rows - 1)
        col = np.minimum(np.floor((lon - spec.lon_min) / spec.dlon + _EDGE_SNAP), spec.cols - 1)
    idx = np.where(inside, row * spec.cols + col, OUT_OF_BOUNDS)
    return idx.astype(np.int64)


def _slot(t: float, t0: float, bin_width: int) -> int:
    return int(math.floor((t - t0) / bin_width))


def bin_demand(trips: Iterable[TripRecord], spec: GridSpec, bin_width: int,
               t0: float, t1: float, stats: ParseStats | None = None) -> DemandTensor:
    """Count pickups per ``[start, start + bin_width)`` slot and grid cell.

    A trailing partial slot is dropped, as are out-of-bounds pickups and
    pickups outside the full slots.
    """
    if not t0 < t1:
        raise ValueError(f"need t0 < t1, got {t0} and {t1}")
    n_slots = int((t1 - t0) // bin_width)
    if n_slots < 1:
        raise ValueError("window shorter than one bin")
    stats = stats if stats is not None else ParseStats()
    values = np.zeros((n_slots, spec.n_cells), dtype=np.int64)
    for trip in trips:
        s = _slot(trip.pickup_time, t0, bin_width)
        if not 0 <= s < n_slots:
            stats.out_of_window += 1
            continue
        c = assign_cell(spec, trip.pickup_lat, trip.pickup_lon)
        if c == OUT_OF_BOUNDS:
            stats.out_of_bounds += 1
            continue
        values[s, c] += 1
    if values.sum() == 0:
        log.warning("no in-range trips; demand tensor is all zero")
    return DemandTensor(values, bin_width, t0, spec)


def build_od(trips: Iterable[TripRecord], spec: GridSpec, t0: float, t1: float) -> ODTensor:
    """Origin-destination counts between grid cells for trips picked up in ``[t0, t1)``."""
    counts = np.zeros((spec.n_cells, spec.n_cells), dtype=np.int64)
    any_dropoff = False
    for trip in trips:
        if not trip.has_dropoff:
            continue
        any_dropoff = True
        if not t0 <= trip.pickup_time < t1:
            continue
        i = assign_cell(spec, trip.pickup_lat, trip.pickup_lon)
        j = assign_cell(spec, trip.dropoff_lat, trip.dropoff_lon)
        if i == OUT_OF_BOUNDS or j == OUT_OF_BOUNDS:
            continue
        counts[i, j] += 1
    if not any_dropoff:
        raise IngestError("mobility graph unavailable: no record carries dropoff coordinates")
    return ODTensor(counts)


# serialization

_DEMAND_MAGIC = b"VGNNDEM1"
_OD_MAGIC = b"VGNNODM1"


def _write_counts(path: Path, magic: bytes, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.rint(arr), dtype="<i8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<QQ", *arr.shape))
        fh.write(arr.tobytes())


def _read_counts(path: Path, magic: bytes) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:8] != magic:
        raise IngestError(f"{path}: bad magic bytes")
    rows, cols = struct.unpack_from("<QQ", buf, 8)
    return np.frombuffer(buf, dtype="<i8", count=rows * cols, offset=24).reshape(rows, cols).copy()


def _sidecar(path: Path) -> Path:
    return Path(str(path) + ".meta.json")


def save_demand(path: str | Path, demand: DemandTensor) -> None:
    path = Path(path)
    _write_counts(path, _DEMAND_MAGIC, demand.values)
    meta = {"kind": "demand", "t0": demand.t0, "bin_width": demand.bin_width,
            "grid": demand.grid.to_dict() if demand.grid else None,
            "shape": list(demand.values.shape)}
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_demand(path: str | Path) -> DemandTensor:
    path = Path(path)
    values = _read_counts(path, _DEMAND_MAGIC)
    meta = json.loads(_sidecar(path).read_text())
    grid = GridSpec(**meta["grid"]) if meta.get("grid") else None
    return DemandTensor(values, int(meta["bin_width"]), float(meta["t0"]), grid)


def save_od(path: str | Path, od: ODTensor, grid: GridSpec | None = None,
            t0: float | None = None, t1: float | None = None) -> None:
    path = Path(path)
    _write_counts(path, _OD_MAGIC, od.counts)
    meta = {"kind": "od", "t0": t0, "t1": t1, "grid": grid.to_dict() if grid else None,
            "shape": list(od.counts.shape)}
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_od(path: str | Path) -> ODTensor:
    return ODTensor(_read_counts(Path(path), _OD_MAGIC))
