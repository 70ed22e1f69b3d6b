"""Glue between datasets, models and the evaluator: everything in counts."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .baselines import HistoricalAverageAll, MLPBaseline, ha_rec_predict, olsr_fit, olsr_predict
from .data import Dataset, NormStats, SampleWindow, normalize, stack_windows
from .trainer import TrainConfig, train

BASELINES = ("ha_all", "ha_rec", "olsr", "mlp")


def predict_counts(model, windows: Sequence[SampleWindow], norm: NormStats, batch: int = 256):
    """Denormalised ``(preds, gts, target_times)``, each ``W x m x ...``."""
    X, M, Y = stack_windows(windows)
    out = np.concatenate([model.predict(X[i : i + batch], M[i : i + batch])
                          for i in range(0, len(X), batch)])
    times = np.stack([w.target_times for w in windows])
    return normalize(out, norm, "inverse"), normalize(Y, norm, "inverse"), times


def baseline_counts(name: str, ds: Dataset, n: int, train_cfg: TrainConfig | None = None,
                    jitter: float = 1e-8, hidden=(128, 128, 64), progress=None):
    """Fit baseline ``name`` on the training split, predict every test window.

    Returns ``(preds, gts, target_times)`` in counts with a singleton step axis.
    """
    test = ds.windows(n, 1, "test")
    if not test:
        raise ValueError("no test windows")
    _, _, Y = stack_windows(test)
    gts = normalize(Y, ds.norm, "inverse")
    times = np.stack([w.target_times for w in test])
    if name == "ha_all":
        od = ds.normalized_od()[: ds.split]
        ha = HistoricalAverageAll(od, ds.timestamps[: ds.split], ds.interval_minutes)
        preds = np.stack([ha.predict(t[0]) for t in times])[:, None]
    elif name == "ha_rec":
        preds = np.stack([ha_rec_predict(w.inputs, n) for w in test])[:, None]
    elif name == "olsr":
        model = olsr_fit(ds.windows(n, 1, "train"), jitter)
        return np.stack([olsr_predict(model, w, ds.norm) for w in test])[:, None], gts, times
    elif name == "mlp":
        model = MLPBaseline(n, ds.grid.H, ds.grid.W, hidden, seed=(train_cfg or TrainConfig()).seed)
        train(model, ds.windows(n, 1, "train"), train_cfg or TrainConfig(), progress, ds.norm)
        return predict_counts(model, test, ds.norm)
    else:
        raise ValueError(f"unknown baseline {name!r}; choose from {', '.join(BASELINES)}")
    return normalize(preds, ds.norm, "inverse"), gts, times
