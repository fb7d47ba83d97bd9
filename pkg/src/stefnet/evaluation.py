"""Error metrics, the rolling (prediction feedback) protocol and a seasonal baseline.

A *predictor* here is any callable ``predictor(E, F, times) -> (B, W, H)``
taking demand lags ``(B, L, W, H)``, factor lags ``(B, L, W, H, M)`` and the
``B`` target timestamps.  :class:`ModelPredictor` wraps trained parameters;
:class:`HistoricalAverage` ignores the lags and uses the timestamps.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .grid import DemandSeries, FactorSeries, SampleSet, hour_of_week
from .model import ModelParams, predict_batch

Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    mape: Optional[float]
    mape_excluded_cells: int
    mape_included_cells: int
    horizon: str = "one_step"
    window: Optional[int] = None
    dataset_tag: str = ""
    mape_mode: str = "elementwise"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def compute_metrics(preds, targets, *, horizon: str = "one_step", window: Optional[int] = None,
                    dataset_tag: str = "", mape_mode: str = "elementwise") -> MetricsReport:
    """MAE, RMSE and MAPE over every cell and time step.

    MAPE divides by the true demand, so cells with zero demand are left out
    and counted in ``mape_excluded_cells``; if every cell is zero, ``mape``
    is ``None``.  ``mape_mode="weighted"`` instead reports
    ``100 * sum|err| / sum(target)`` over all cells.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"prediction shape {preds.shape} != target shape {targets.shape}")
    if preds.ndim != 3 or preds.shape[0] < 1:
        raise ValueError(f"expected (B, W, H) arrays with B >= 1, got {preds.shape}")
    err = np.abs(targets - preds)
    mae = float(err.mean())
    rmse = float(np.sqrt((err * err).mean()))
    pos = targets > 0
    n_in = int(pos.sum())
    n_out = int(err.size - n_in)
    if mape_mode == "elementwise":
        mape = float(100.0 * (err[pos] / targets[pos]).mean()) if n_in else None
    elif mape_mode == "weighted":
        total = targets.sum()
        mape = float(100.0 * err.sum() / total) if total > 0 else None
    else:
        raise ValueError(f"unknown mape_mode {mape_mode!r}")
    return MetricsReport(mae, rmse, mape, n_out, n_in, horizon, window, dataset_tag, mape_mode)


class ModelPredictor:
    """Adapts trained parameters to the predictor interface."""

    def __init__(self, params: ModelParams):
        self.params = params

    def __call__(self, E, F, times=None) -> np.ndarray:
        return predict_batch(self.params, E=E, F=F)


class HistoricalAverage:
    """Mean demand per cell for each hour of the week.

    Fitted on a demand series covering at least one full week.
    """

    def __init__(self, train_demand: DemandSeries):
        slots_per_week = 7 * 24 * 60 // train_demand.grid.resolution_minutes
        if train_demand.T < slots_per_week:
            raise ValueError(f"historical average needs at least one week of data "
                             f"({slots_per_week} slots), got {train_demand.T}")
        how = hour_of_week(train_demand.timestamps())
        W, H = train_demand.grid.width, train_demand.grid.height
        sums = np.zeros((168, W, H))
        np.add.at(sums, how, train_demand.counts.astype(np.float64))
        n = np.bincount(how, minlength=168).astype(np.float64)
        self.table = sums / n[:, None, None]

    def predict(self, times) -> np.ndarray:
        return self.table[hour_of_week(np.asarray(times, dtype="datetime64[s]"))]

    def __call__(self, E, F, times) -> np.ndarray:
        return self.predict(times)


def historical_average_baseline(train_demand: DemandSeries) -> HistoricalAverage:
    return HistoricalAverage(train_demand)


def as_predictor(model) -> Predictor:
    return ModelPredictor(model) if isinstance(model, ModelParams) else model


def evaluate_samples(model, samples: SampleSet, dataset_tag: str = "", **kw) -> MetricsReport:
    """One-step metrics on a SampleSet (true lags for every target)."""
    pred = as_predictor(model)(samples.E, samples.F, samples.timestamps)
    return compute_metrics(pred, samples.targets, horizon="one_step",
                           dataset_tag=dataset_tag, **kw)


@dataclass
class RollingResult:
    report: MetricsReport
    predictions: np.ndarray
    targets: np.ndarray
    times: np.ndarray
    step_mae: np.ndarray
    step_rmse: np.ndarray

    def trace_rows(self) -> list[tuple[int, float, float]]:
        return [(i, float(a), float(b)) for i, (a, b) in enumerate(zip(self.step_mae, self.step_rmse))]

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mae", "rmse"])
            for step, mae, rmse in self.trace_rows():
                w.writerow([step, repr(mae), repr(rmse)])


def rolling_evaluate(model, demand: DemandSeries, factors: FactorSeries, window: int,
                     L: Optional[int] = None, start: Optional[int] = None, dataset_tag: str = "rolling",
                     **metric_kw) -> RollingResult:
    """Predict ``window`` consecutive slots, feeding each prediction back as a lag.

    The first step sees the true demand at ``start - L .. start - 1``.  After
    each step the prediction (clamped at zero) becomes the newest lag and the
    oldest lag is dropped.  Factor lags always come from ``factors``.
    Metrics score the raw predictions.  ``start`` defaults to
    ``demand.T - window`` so the window ends at the last slot.
    """
    if demand.grid != factors.grid or demand.T != factors.T or demand.start_time != factors.start_time:
        raise ValueError("demand and factor series are not aligned")
    if L is None:
        if not isinstance(model, ModelParams):
            raise ValueError("L is required when the predictor is not a ModelParams")
        L = model.config.L
    if int(window) != window or window < 1:
        raise ValueError(f"window must be a positive integer, got {window}")
    if start is None:
        start = demand.T - window
    if start < L or start + window > demand.T:
        raise ValueError(f"rolling window of {window} steps does not fit: needs {L} seed slots "
                         f"plus {window} targets, series has {demand.T} slots (start={start})")
    predictor = as_predictor(model)
    times = demand.timestamps()
    back = np.arange(L)
    lags = demand.counts[start - 1 - back].astype(np.float64)
    preds = []
    for step in range(window):
        t = start + step
        F = factors.factors[t - 1 - back].astype(np.float64)
        pred = np.asarray(predictor(lags[None], F[None], times[t:t + 1]), dtype=np.float64)[0]
        preds.append(pred)
        lags = np.concatenate([np.maximum(pred, 0.0)[None], lags[:-1]], axis=0)

    preds = np.stack(preds)
    targets = demand.counts[start:start + window].astype(np.float64)
    err = np.abs(preds - targets)
    report = compute_metrics(preds, targets, horizon="rolling", window=window,
                             dataset_tag=dataset_tag, **metric_kw)
    return RollingResult(report, preds, targets, times[start:start + window],
                         err.mean(axis=(1, 2)), np.sqrt((err ** 2).mean(axis=(1, 2))))


def oracle_predictor(demand: DemandSeries) -> Predictor:
    """Predictor that looks up the true grid for each target time (for testing)."""
    def predict(E, F, times):
        idx = ((np.asarray(times, dtype="datetime64[s]") - demand.start_time)
               // demand.grid.slot).astype(np.int64)
        return demand.counts[idx].astype(np.float64)
    return predict

