"""
Training on a synthetic city
============================

A small synthetic city with a daily cycle and two POI-driven factors.
We train briefly, then compare one-step error with a seasonal baseline
and with the rolling protocol, where each prediction is fed back as the
newest lag.
"""

import logging

from stefnet import (StefConfig, SynthConfig, TrainConfig, build_samples, evaluate_samples,
                     generate, historical_average_baseline, init_params, rolling_evaluate,
                     split_dataset, train)

logging.basicConfig(level=logging.INFO, format="%(message)s")

ds = generate(SynthConfig(W=6, H=6, M=2, T=720, base_rate=5.0, factor_boost=(8.0, 12.0),
                          daily_amplitude=0.5, seed=3))
samples = build_samples(ds.demand, ds.factors, L=4)
split = split_dataset(samples, ratios=(0.65, 0.15, 0.20), rolling_window=72)
print("samples train / validation / test:", len(split.train), len(split.validation), len(split.test))

config = StefConfig(W=6, H=6, M=2, L=4, K=16, d=32, u=32)
params = init_params(config, seed=0)
print("parameters:", params.n_params())

# a short run; the full protocol uses patience 100 and up to 2000 epochs
best, report = train(params, split.train, split.validation,
                     TrainConfig(learning_rate=3e-3, max_epochs=40, early_stop_patience=10))
print(f"best epoch {report.best_epoch} of {report.epochs} ({report.stopped_reason}), "
      f"validation MAE {report.best_val_loss:.3f}")

fit_until = int(split.train.target_index[-1]) + 1
baseline = historical_average_baseline(ds.demand.slice(0, fit_until))
print("one-step test MAE, model   :", round(evaluate_samples(best, split.test).mae, 3))
print("one-step test MAE, baseline:", round(evaluate_samples(baseline, split.test).mae, 3))

roll = rolling_evaluate(best, ds.demand, ds.factors, window=72)
print("rolling MAE over 72 hours  :", round(roll.report.mae, 3))
