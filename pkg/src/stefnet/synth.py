"""Synthetic city generator: seasonal Poisson demand boosted by scheduled POIs."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .grid import (DemandSeries, FactorSchedule, FactorSeries, GridSpec, PoiRecord,
                   encode_external_factors, hour_of_day, hour_of_week, to_datetime64,
                   write_pois_json)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    W: int = 8
    H: int = 8
    T: int = 1440
    M: int = 2
    base_rate: float = 5.0
    factor_boost: tuple = (8.0, 12.0)
    daily_amplitude: float = 0.0
    weekly_amplitude: float = 0.0
    noise: str = "poisson"
    seed: int = 0
    poi_count: int = 2
    start_time: str = "2024-01-01T00:00:00"
    bounds: tuple = (40.70, 40.80, -74.02, -73.92)

    def __post_init__(self):
        object.__setattr__(self, "factor_boost", tuple(float(b) for b in self.factor_boost))
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        for name in ("W", "H", "T", "M"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"SynthConfig.{name} must be a positive integer, got {v}")
        if int(self.poi_count) != self.poi_count or self.poi_count < 0:
            raise ValueError("poi_count must be a non-negative integer")
        if len(self.factor_boost) != self.M:
            raise ValueError(f"factor_boost needs {self.M} entries, got {len(self.factor_boost)}")
        if self.base_rate < 0 or any(b < 0 for b in self.factor_boost):
            raise ValueError("rates must be non-negative")
        for name in ("daily_amplitude", "weekly_amplitude"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.noise not in ("poisson", "none"):
            raise ValueError(f"noise must be 'poisson' or 'none', got {self.noise!r}")
        if len(self.bounds) != 4:
            raise ValueError("bounds must be (min_lat, max_lat, min_lon, max_lon)")
        to_datetime64(self.start_time)

    @property
    def grid(self) -> GridSpec:
        lat0, lat1, lon0, lon1 = self.bounds
        return GridSpec(lat0, lat1, lon0, lon1, self.W, self.H, 60)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["factor_boost"] = list(self.factor_boost)
        d["bounds"] = list(self.bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class SynthDataset(NamedTuple):
    demand: DemandSeries
    factors: FactorSeries
    pois: list
    grid: GridSpec
    rate: np.ndarray

    def save(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"demand": out / "demand.bin", "factors": out / "factors.bin",
                 "pois": out / "pois.json", "grid": out / "grid.json"}
        self.demand.save(paths["demand"])
        self.factors.save(paths["factors"])
        write_pois_json(self.pois, paths["pois"])
        paths["grid"].write_text(json.dumps(self.grid.to_dict(), indent=2) + "\n", encoding="utf-8")
        return paths


def _cell_centre(grid: GridSpec, w: int, h: int) -> tuple[float, float]:
    lat = grid.min_lat + (h + 0.5) * (grid.max_lat - grid.min_lat) / grid.height
    lon = grid.min_lon + (w + 0.5) * (grid.max_lon - grid.min_lon) / grid.width
    return lat, lon


def random_pois(config: SynthConfig, rng: np.random.Generator) -> list[PoiRecord]:
    """Place ``poi_count`` POIs per factor at uniformly drawn cells.

    Each gets a contiguous block of 2 to 6 active hours, and is active
    either every day or on weekdays only.
    """
    grid = config.grid
    pois = []
    for m in range(config.M):
        for k in range(config.poi_count):
            w = int(rng.integers(config.W))
            h = int(rng.integers(config.H))
            first = int(rng.integers(24))
            length = int(rng.integers(2, 7))
            days = range(7) if rng.random() < 0.5 else range(5)
            lat, lon = _cell_centre(grid, w, h)
            sched = FactorSchedule(frozenset((first + i) % 24 for i in range(length)),
                                   frozenset(days))
            pois.append(PoiRecord(f"factor{m}_poi{k}", lat, lon, m, sched))
    return pois


def rate_field(config: SynthConfig, factors: np.ndarray) -> np.ndarray:
    times = to_datetime64(config.start_time) + np.arange(config.T) * np.timedelta64(3600, "s")
    daily = 1.0 + config.daily_amplitude * np.sin(2 * np.pi * hour_of_day(times) / 24.0)
    weekly = 1.0 + config.weekly_amplitude * np.sin(2 * np.pi * hour_of_week(times) / 168.0)
    base = config.base_rate * daily * weekly
    boost = factors.astype(np.float64) @ np.asarray(config.factor_boost)
    return base[:, None, None] + boost


def generate(config: SynthConfig, pois: Optional[Sequence[PoiRecord]] = None) -> SynthDataset:
    """Deterministically generate demand, factors and POIs from ``config``.

    Pass ``pois`` to use hand-placed POIs instead of seeded random ones.
    """
    if config.T % 24:
        logger.warning("SynthConfig.T=%d is not a whole number of days", config.T)
    rng = np.random.default_rng(config.seed)
    grid = config.grid
    pois = list(pois) if pois is not None else random_pois(config, rng)
    factors, _ = encode_external_factors(pois, grid, config.start_time, config.T, config.M)
    lam = rate_field(config, factors.factors)
    if config.noise == "poisson":
        counts = rng.poisson(lam)
    else:
        counts = np.floor(lam + 0.5)
    demand = DemandSeries(grid, config.start_time, counts.astype(np.int64))
    return SynthDataset(demand, factors, pois, grid, lam)
