"""
How rolling error accumulates
=============================

In the rolling protocol only the first step sees true demand.  We compare
three predictors over the same window: one that knows the future (zero
error), one that repeats the newest lag (its own output, after step 0),
and the seasonal historical average, which ignores the lags entirely.
"""

import numpy as np

from stefnet import HistoricalAverage, SynthConfig, generate, rolling_evaluate
from stefnet.evaluation import oracle_predictor

ds = generate(SynthConfig(W=5, H=5, M=1, T=24 * 28, factor_boost=(10.0,),
                          daily_amplitude=0.6, seed=4))
window = 48


def persistence(E, F, times):
    return E[:, 0]                       # lag 0 is the most recent hour


predictors = {
    "oracle": oracle_predictor(ds.demand),
    "persistence": persistence,
    "seasonal": HistoricalAverage(ds.demand.slice(0, ds.demand.T - window)),
}

for name, predictor in predictors.items():
    r = rolling_evaluate(predictor, ds.demand, ds.factors, window, L=4)
    first, last = r.step_mae[:6].mean(), r.step_mae[-6:].mean()
    print(f"{name:12s} rolling MAE {r.report.mae:6.3f}   first 6 steps {first:6.3f}   "
          f"last 6 steps {last:6.3f}")

# the per-step trace can be written out for plotting
r = rolling_evaluate(persistence, ds.demand, ds.factors, window, L=4)
r.write_trace_csv("rolling_trace.csv")
print("wrote rolling_trace.csv with", len(r.trace_rows()), "rows")
print("persistence feeds back a constant grid:", np.ptp(r.predictions, axis=0).max() == 0)
