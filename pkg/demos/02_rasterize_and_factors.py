"""
From pickups and POIs to grid tensors
=====================================

Pickups are counted per hour and grid cell.  Points of interest become
binary factor channels that switch on during their scheduled hours.
"""

import numpy as np

from stefnet.grid import (FactorSchedule, GridSpec, PoiRecord, TripRecord,
                          encode_external_factors, rasterize_trips, to_datetime64)

# a 4 x 3 grid over a small box; w follows longitude, h follows latitude
grid = GridSpec(min_lat=40.70, max_lat=40.76, min_lon=-74.02, max_lon=-73.94, width=4, height=3)
start = "2024-03-04T00:00:00Z"          # a Monday

rng = np.random.default_rng(1)
trips = [
    TripRecord(to_datetime64(start) + np.timedelta64(int(s), "s"),
               float(rng.uniform(40.69, 40.77)), float(rng.uniform(-74.03, -73.93)))
    for s in rng.integers(0, 6 * 3600, size=200)
]

demand, dropped = rasterize_trips(trips, grid, start, T=6)
print("demand tensor shape:", demand.counts.shape)
print("trips kept / dropped:", demand.counts.sum(), "/", dropped)
print("hour 0 counts (rows are w, columns are h):")
print(demand.counts[0])

pois = [
    PoiRecord("stadium", 40.745, -73.955, 0, FactorSchedule(frozenset({2, 3}), frozenset(range(7)))),
    PoiRecord("office park", 40.705, -74.010, 1, FactorSchedule(frozenset(range(1, 5)), frozenset(range(5)))),
    PoiRecord("ferry", 41.5, -74.0, 1, FactorSchedule(frozenset(range(24)), frozenset(range(7)))),
]
factors, skipped = encode_external_factors(pois, grid, start, T=6, M=2)
print("factor tensor shape:", factors.factors.shape)
print("POIs outside the grid:", skipped)
for m in range(2):
    active = [int(t) for t in np.nonzero(factors.factors[:, :, :, m].any(axis=(1, 2)))[0]]
    print(f"factor {m} active in hours {active}")
