"""Turning trip records and points of interest into model-ready tensors.

Demand is binned on a uniform lat/lon grid: the width axis ``w`` follows
longitude and the height axis ``h`` follows latitude.  Time is binned in
slots of ``resolution_minutes`` starting at an aligned ``start``.  All
timestamps are UTC and handled as ``numpy.datetime64[s]``; weekdays count
from Monday = 0.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .container import read_container, write_container

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
TRIP_COLUMNS = ("pickup_datetime", "pickup_latitude", "pickup_longitude")


def to_datetime64(value) -> np.datetime64:
    """Coerce an ISO-8601 string, ``datetime`` or ``datetime64`` to UTC seconds."""
    if isinstance(value, np.datetime64):
        if np.isnat(value):
            raise ValueError("timestamp is NaT")
        return value.astype("datetime64[s]")
    if isinstance(value, str):
        text = value.strip()
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        try:
            value = datetime.fromisoformat(text)
        except ValueError as exc:
            raise ValueError(f"malformed timestamp {value!r}") from exc
    if isinstance(value, datetime):
        if value.tzinfo is not None:
            value = value.astimezone(timezone.utc).replace(tzinfo=None)
        return np.datetime64(value.replace(microsecond=0), "s")
    raise ValueError(f"cannot interpret {value!r} as a timestamp")


def hour_of_day(times: np.ndarray) -> np.ndarray:
    t = np.asarray(times, dtype="datetime64[s]")
    return ((t - t.astype("datetime64[D]")).astype(np.int64) // 3600).astype(np.int64)


def day_of_week(times: np.ndarray) -> np.ndarray:
    days = np.asarray(times, dtype="datetime64[s]").astype("datetime64[D]").astype(np.int64)
    # 1970-01-01 was a Thursday
    return (days + 3) % 7


def hour_of_week(times: np.ndarray) -> np.ndarray:
    return day_of_week(times) * 24 + hour_of_day(times)


@dataclass(frozen=True)
class GridSpec:
    min_lat: float
    max_lat: float
    min_lon: float
    max_lon: float
    width: int
    height: int
    resolution_minutes: int = 60

    def __post_init__(self):
        vals = (self.min_lat, self.max_lat, self.min_lon, self.max_lon)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("grid bounds must be finite")
        if not self.max_lat > self.min_lat:
            raise ValueError(f"max_lat {self.max_lat} must exceed min_lat {self.min_lat}")
        if not self.max_lon > self.min_lon:
            raise ValueError(f"max_lon {self.max_lon} must exceed min_lon {self.min_lon}")
        if int(self.width) != self.width or self.width < 1:
            raise ValueError(f"width must be a positive integer, got {self.width}")
        if int(self.height) != self.height or self.height < 1:
            raise ValueError(f"height must be a positive integer, got {self.height}")
        if int(self.resolution_minutes) != self.resolution_minutes or self.resolution_minutes < 1:
            raise ValueError("resolution_minutes must be a positive integer")

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def slot(self) -> np.timedelta64:
        return np.timedelta64(int(self.resolution_minutes) * 60, "s")

    def to_dict(self) -> dict:
        return {"min_lat": self.min_lat, "max_lat": self.max_lat,
                "min_lon": self.min_lon, "max_lon": self.max_lon,
                "width": self.width, "height": self.height,
                "resolution_minutes": self.resolution_minutes}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        required = ("min_lat", "max_lat", "min_lon", "max_lon", "width", "height")
        missing = [k for k in required if k not in d]
        if missing:
            raise ValueError(f"grid spec is missing {', '.join(missing)}")
        return cls(float(d["min_lat"]), float(d["max_lat"]), float(d["min_lon"]),
                   float(d["max_lon"]), int(d["width"]), int(d["height"]),
                   int(d.get("resolution_minutes", 60)))

    @classmethod
    def from_json(cls, path) -> "GridSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def cell_index(self, lat, lon) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Map coordinates to ``(w, h, inside)``.

        Lower cell edges are inclusive and upper edges exclusive, except at
        the global maximum where the last cell also takes the edge.
        """
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        inside = ((lat >= self.min_lat) & (lat <= self.max_lat)
                  & (lon >= self.min_lon) & (lon <= self.max_lon))
        fw = (lon - self.min_lon) / (self.max_lon - self.min_lon) * self.width
        fh = (lat - self.min_lat) / (self.max_lat - self.min_lat) * self.height
        w = np.clip(np.floor(np.where(inside, fw, 0.0)).astype(np.int64), 0, self.width - 1)
        h = np.clip(np.floor(np.where(inside, fh, 0.0)).astype(np.int64), 0, self.height - 1)
        return w, h, inside


def _check_aligned(start: np.datetime64, spec: GridSpec) -> None:
    secs = start.astype(np.int64)
    if secs % (spec.resolution_minutes * 60):
        raise ValueError(f"start {start} is not aligned to a {spec.resolution_minutes}-minute boundary")


@dataclass
class DemandSeries:
    """Ride counts ``counts[t, w, h]`` per time slot and grid cell."""

    grid: GridSpec
    start_time: np.datetime64
    counts: np.ndarray

    def __post_init__(self):
        self.start_time = to_datetime64(self.start_time)
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 3 or self.counts.shape[1:] != (self.grid.width, self.grid.height):
            raise ValueError(f"counts must be (T, {self.grid.width}, {self.grid.height}), "
                             f"got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("demand counts must be non-negative")

    @property
    def T(self) -> int:
        return self.counts.shape[0]

    def timestamps(self) -> np.ndarray:
        return self.start_time + np.arange(self.T) * self.grid.slot

    def slice(self, start: int, stop: int) -> "DemandSeries":
        return DemandSeries(self.grid, self.start_time + start * self.grid.slot,
                            self.counts[start:stop].copy())

    def save(self, path) -> None:
        meta = {"kind": "demand", "format_version": FORMAT_VERSION,
                "grid": self.grid.to_dict(), "start_time": str(self.start_time),
                "T": self.T}
        write_container(path, meta, {"counts": self.counts.astype("<i8")})

    @classmethod
    def load(cls, path) -> "DemandSeries":
        meta, arrays = read_container(path)
        _check_kind(meta, "demand", path)
        return cls(GridSpec.from_dict(meta["grid"]), np.datetime64(meta["start_time"], "s"),
                   arrays["counts"])


@dataclass
class FactorSeries:
    """Binary activations ``factors[t, w, h, m]``."""

    grid: GridSpec
    start_time: np.datetime64
    factors: np.ndarray

    def __post_init__(self):
        self.start_time = to_datetime64(self.start_time)
        self.factors = np.asarray(self.factors)
        g = self.grid
        if self.factors.ndim != 4 or self.factors.shape[1:3] != (g.width, g.height):
            raise ValueError(f"factors must be (T, {g.width}, {g.height}, M), got {self.factors.shape}")
        if not np.isin(self.factors, (0, 1)).all():
            raise ValueError("factor values must be 0 or 1")
        self.factors = self.factors.astype(np.uint8)

    @property
    def T(self) -> int:
        return self.factors.shape[0]

    @property
    def M(self) -> int:
        return self.factors.shape[3]

    def slice(self, start: int, stop: int) -> "FactorSeries":
        return FactorSeries(self.grid, self.start_time + start * self.grid.slot,
                            self.factors[start:stop].copy())

    def save(self, path) -> None:
        meta = {"kind": "factors", "format_version": FORMAT_VERSION,
                "grid": self.grid.to_dict(), "start_time": str(self.start_time),
                "T": self.T, "M": self.M}
        write_container(path, meta, {"factors": self.factors.astype("|u1")})

    @classmethod
    def load(cls, path) -> "FactorSeries":
        meta, arrays = read_container(path)
        _check_kind(meta, "factors", path)
        return cls(GridSpec.from_dict(meta["grid"]), np.datetime64(meta["start_time"], "s"),
                   arrays["factors"])


def _check_kind(meta: dict, kind: str, path) -> None:
    if meta.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} container, found {meta.get('kind')!r}")
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: format_version {meta.get('format_version')} is not supported "
                         f"(expected {FORMAT_VERSION})")


# --- trips -----------------------------------------------------------------

@dataclass(frozen=True)
class TripRecord:
    pickup_time: np.datetime64
    pickup_lat: float
    pickup_lon: float


def read_trips_csv(path) -> list[TripRecord]:
    """Read pickups from a CSV with the standard three columns (extra columns ignored)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in TRIP_COLUMNS:
            if col not in header:
                raise ValueError(f"trips CSV is missing required column {col!r}")
        trips = []
        for lineno, row in enumerate(reader, start=2):
            try:
                trips.append(TripRecord(to_datetime64(row["pickup_datetime"]),
                                        float(row["pickup_latitude"]),
                                        float(row["pickup_longitude"])))
            except ValueError as exc:
                raise ValueError(f"trips CSV line {lineno}: {exc}") from exc
    return trips


def rasterize_trips(trips: Sequence[TripRecord], spec: GridSpec, start, T: int
                    ) -> tuple[DemandSeries, int]:
    """Count pickups per time slot and cell.

    Returns the series and the number of trips dropped for falling outside
    the bounding box or the ``T`` slots after ``start``.
    """
    if int(T) != T or T <= 0:
        raise ValueError(f"T must be a positive integer, got {T}")
    start = to_datetime64(start)
    _check_aligned(start, spec)
    counts = np.zeros((T, spec.width, spec.height), dtype=np.int64)
    if len(trips) == 0:
        return DemandSeries(spec, start, counts), 0

    times = np.array([to_datetime64(tr.pickup_time) for tr in trips], dtype="datetime64[s]")
    lat = np.array([tr.pickup_lat for tr in trips], dtype=np.float64)
    lon = np.array([tr.pickup_lon for tr in trips], dtype=np.float64)
    if not (np.isfinite(lat).all() and np.isfinite(lon).all()):
        raise ValueError("trip coordinates must be finite")
    slot = (times - start).astype(np.int64) // (spec.resolution_minutes * 60)
    w, h, inside = spec.cell_index(lat, lon)
    keep = inside & (slot >= 0) & (slot < T)
    np.add.at(counts, (slot[keep], w[keep], h[keep]), 1)
    dropped = int((~keep).sum())
    if dropped:
        logger.info("rasterize_trips: dropped %d of %d trips outside grid or time range",
                    dropped, len(trips))
    return DemandSeries(spec, start, counts), dropped


# --- points of interest ----------------------------------------------------

@dataclass(frozen=True)
class FactorSchedule:
    active_hours: frozenset
    active_days: frozenset = frozenset(range(7))

    def __post_init__(self):
        object.__setattr__(self, "active_hours", frozenset(int(x) for x in self.active_hours))
        object.__setattr__(self, "active_days", frozenset(int(x) for x in self.active_days))
        if not self.active_hours:
            raise ValueError("active_hours must not be empty")
        if not all(0 <= x < 24 for x in self.active_hours):
            raise ValueError(f"active_hours must lie in [0, 24), got {sorted(self.active_hours)}")
        if not all(0 <= x < 7 for x in self.active_days):
            raise ValueError(f"active_days must lie in [0, 7), got {sorted(self.active_days)}")

    def is_active(self, times) -> np.ndarray:
        hours = hour_of_day(times)
        days = day_of_week(times)
        return (np.isin(hours, sorted(self.active_hours))
                & np.isin(days, sorted(self.active_days)))


@dataclass(frozen=True)
class PoiRecord:
    name: str
    lat: float
    lon: float
    factor_index: int
    schedule: FactorSchedule

    def to_dict(self) -> dict:
        return {"name": self.name, "lat": self.lat, "lon": self.lon,
                "factor_index": self.factor_index,
                "active_hours": sorted(self.schedule.active_hours),
                "active_days": sorted(self.schedule.active_days)}

    @classmethod
    def from_dict(cls, d: dict) -> "PoiRecord":
        for key in ("name", "lat", "lon", "factor_index", "active_hours"):
            if key not in d:
                raise ValueError(f"POI entry is missing {key!r}")
        sched = FactorSchedule(frozenset(d["active_hours"]),
                               frozenset(d.get("active_days", range(7))))
        return cls(str(d["name"]), float(d["lat"]), float(d["lon"]), int(d["factor_index"]), sched)


def read_pois_json(path) -> list[PoiRecord]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError("POI file must hold a JSON array")
    return [PoiRecord.from_dict(d) for d in data]


def write_pois_json(pois: Sequence[PoiRecord], path) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in pois], indent=2) + "\n",
                          encoding="utf-8")


def encode_external_factors(pois: Sequence[PoiRecord], spec: GridSpec, start, T: int, M: int
                            ) -> tuple[FactorSeries, list[str]]:
    """Build the binary factor tensor from POI locations and schedules.

    A cell holds 1 for factor ``m`` at slot ``t`` when any POI of that
    factor lies in the cell and its schedule is active at the slot start.
    POIs outside the grid are skipped; their names are returned.
    """
    if int(T) != T or T <= 0:
        raise ValueError(f"T must be a positive integer, got {T}")
    if M < 1:
        raise ValueError(f"M must be positive, got {M}")
    for p in pois:
        if not 0 <= p.factor_index < M:
            raise ValueError(f"POI {p.name!r} has factor_index {p.factor_index} outside [0, {M})")
    start = to_datetime64(start)
    _check_aligned(start, spec)
    times = start + np.arange(T) * spec.slot
    factors = np.zeros((T, spec.width, spec.height, M), dtype=np.uint8)
    skipped = []
    for p in pois:
        w, h, inside = spec.cell_index(p.lat, p.lon)
        if not inside:
            skipped.append(p.name)
            logger.warning("POI %r at (%g, %g) lies outside the grid; ignored", p.name, p.lat, p.lon)
            continue
        active = p.schedule.is_active(times)
        factors[active, int(w), int(h), p.factor_index] = 1
    return FactorSeries(spec, start, factors), skipped


# --- samples ---------------------------------------------------------------

@dataclass
class SampleSet:
    """Lag-stacked training samples.

    ``E[b, l]`` and ``F[b, l]`` hold the series at ``target_index[b] - (l + 1)``
    so lag 0 is the most recent hour.
    """

    E: np.ndarray
    F: np.ndarray
    targets: np.ndarray
    timestamps: np.ndarray
    target_index: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.target_index is None:
            self.target_index = np.arange(len(self.targets))

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def L(self) -> int:
        return self.E.shape[1]

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.E[idx], self.F[idx], self.targets[idx],
                         self.timestamps[idx], self.target_index[idx])


def _check_aligned_series(demand: DemandSeries, factors: FactorSeries) -> None:
    if demand.grid != factors.grid:
        raise ValueError("demand and factor series use different grids")
    if demand.start_time != factors.start_time or demand.T != factors.T:
        raise ValueError("demand and factor series cover different time ranges")


def build_samples(demand: DemandSeries, factors: FactorSeries, L: int) -> SampleSet:
    """One sample per target slot ``t = L .. T-1`` with the previous ``L`` slots as lags."""
    _check_aligned_series(demand, factors)
    if L < 1:
        raise ValueError(f"L must be positive, got {L}")
    if demand.T <= L:
        raise ValueError(f"need more than L={L} time steps to build samples, got T={demand.T}")
    t = np.arange(L, demand.T)
    lag_idx = t[:, None] - 1 - np.arange(L)[None, :]
    return SampleSet(
        E=demand.counts[lag_idx].astype(np.float64),
        F=factors.factors[lag_idx],
        targets=demand.counts[t].astype(np.float64),
        timestamps=demand.timestamps()[t],
        target_index=t,
    )


class DatasetSplit(NamedTuple):
    train: SampleSet
    validation: SampleSet
    test: SampleSet
    rolling: SampleSet


def split_counts(n: int, ratios) -> tuple[int, int, int]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    # tolerance guards products like 0.29 * 100 = 28.999999999999996
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = n - n_train - n_val
    for label, k in (("train", n_train), ("validation", n_val), ("test", n_test)):
        if k <= 0:
            raise ValueError(f"split leaves the {label} block empty ({n} samples, ratios {ratios})")
    return n_train, n_val, n_test


def split_dataset(samples: SampleSet, ratios=(0.65, 0.15, 0.20), rolling_window: int = 168
                  ) -> DatasetSplit:
    """Chronological train/validation/test split; ``rolling`` is the tail of test."""
    n_train, n_val, n_test = split_counts(len(samples), ratios)
    train = samples.subset(slice(0, n_train))
    val = samples.subset(slice(n_train, n_train + n_val))
    test = samples.subset(slice(n_train + n_val, None))
    roll = test.subset(slice(max(0, n_test - rolling_window), None))
    return DatasetSplit(train, val, test, roll)
