"""Grid-based ride demand forecasting with a CNN + LSTM hybrid and external-factor fusion."""

from .evaluation import (HistoricalAverage, MetricsReport, ModelPredictor, compute_metrics,
                         evaluate_samples, historical_average_baseline, rolling_evaluate)
from .grid import (DemandSeries, FactorSchedule, FactorSeries, GridSpec, PoiRecord, SampleSet,
                   TripRecord, build_samples, encode_external_factors, rasterize_trips,
                   split_dataset)
from .model import (ModelParams, StefConfig, forward, init_params, load_checkpoint,
                    predict_batch, save_checkpoint)
from .synth import SynthConfig, generate
from .training import TrainConfig, TrainReport, mae_loss, train

__version__ = "0.1.0"

__all__ = [
    "DemandSeries", "FactorSchedule", "FactorSeries", "GridSpec", "HistoricalAverage",
    "MetricsReport", "ModelParams", "ModelPredictor", "PoiRecord", "SampleSet", "StefConfig",
    "SynthConfig", "TrainConfig", "TrainReport", "TripRecord", "build_samples", "compute_metrics",
    "encode_external_factors", "evaluate_samples", "forward", "generate",
    "historical_average_baseline", "init_params", "load_checkpoint", "mae_loss", "predict_batch",
    "rasterize_trips", "rolling_evaluate", "save_checkpoint", "split_dataset", "train",
]
