"""Reference predictors: historical averages, least squares and a per-channel MLP.

All work on normalised demand; evaluation denormalises their output the
same way it does for the network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import NormStats, SampleWindow, normalize, stack_windows
from .optim import ParamGroup, xavier_init


# ------------------------------------------------------- historical average


def time_slots(timestamps, interval_minutes: int) -> np.ndarray:
    ts = np.asarray(timestamps)
    minutes = (ts - ts.astype("datetime64[D]")).astype("timedelta64[m]").astype(np.int64)
    return minutes // interval_minutes


def ha_all_predict(train_od, train_times, target_time, interval_minutes: int) -> np.ndarray:
    """Mean of every training interval in the same time-of-day slot as ``target_time``."""
    slots = time_slots(train_times, interval_minutes)
    target = int(time_slots(np.asarray([target_time]), interval_minutes)[0])
    sel = slots == target
    if not sel.any():
        raise ValueError(f"no training interval in slot {target}")
    return np.asarray(train_od)[sel].mean(axis=0)


class HistoricalAverageAll:
    """Slot-mean table precomputed once from the training split."""

    def __init__(self, train_od, train_times, interval_minutes: int):
        slots = time_slots(train_times, interval_minutes)
        train_od = np.asarray(train_od, dtype=np.float64)
        self.interval_minutes = interval_minutes
        self.table = {int(s): train_od[slots == s].mean(axis=0) for s in np.unique(slots)}

    def predict(self, target_time) -> np.ndarray:
        s = int(time_slots(np.asarray([target_time]), self.interval_minutes)[0])
        if s not in self.table:
            raise ValueError(f"no training interval in slot {s}")
        return self.table[s]


def ha_rec_predict(recent, n: int | None = None) -> np.ndarray:
    """Entrywise mean of the last ``n`` intervals."""
    recent = np.asarray(recent, dtype=np.float64)
    if n is not None and len(recent) != n:
        raise ValueError(f"expected {n} recent intervals, got {len(recent)}")
    if len(recent) == 0:
        raise ValueError("no recent intervals")
    return recent.mean(axis=0)


# -------------------------------------------------------------- least squares


def least_squares(A: np.ndarray, Y: np.ndarray, jitter: float = 1e-8) -> np.ndarray:
    """Solve ``min ||[A 1] B - Y||^2 + jitter ||B||^2`` via the normal equations.

    Returns ``B`` with the intercept as its last row.  Raises
    ``numpy.linalg.LinAlgError`` when the system is singular.
    """
    A = np.asarray(A, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    A1 = np.hstack([A, np.ones((len(A), 1))])
    gram = A1.T @ A1
    if jitter:
        gram[np.diag_indices_from(gram)] += jitter
    elif np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise np.linalg.LinAlgError("normal equations are singular; add ridge jitter")
    return np.linalg.solve(gram, A1.T @ Y)


@dataclass
class OLSRModel:
    coef: np.ndarray  # (n*N*H*W + 1) x (N*H*W), intercept last
    n: int
    target_shape: tuple[int, ...]

    def predict_normalized(self, inputs: np.ndarray) -> np.ndarray:
        inputs = np.asarray(inputs)
        batched = inputs.ndim == 5
        flat = inputs.reshape(len(inputs) if batched else 1, -1)
        if flat.shape[1] + 1 != self.coef.shape[0]:
            raise ValueError("window size does not match the fitted model")
        out = flat @ self.coef[:-1] + self.coef[-1]
        out = out.reshape((-1,) + self.target_shape)
        return out if batched else out[0]


def olsr_fit(windows: Sequence[SampleWindow], jitter: float = 1e-8) -> OLSRModel:
    X, _, Y = stack_windows(windows)
    n = X.shape[1]
    coef = least_squares(X.reshape(len(X), -1), Y[:, 0].reshape(len(Y), -1), jitter)
    return OLSRModel(coef, n, Y.shape[2:])


def olsr_predict(model: OLSRModel, window, norm: NormStats | None = None) -> np.ndarray:
    """Affine prediction; with ``norm`` the result is in counts, floored at zero."""
    inputs = window.inputs if isinstance(window, SampleWindow) else window
    out = model.predict_normalized(inputs)
    if norm is None:
        return out
    return np.maximum(normalize(out, norm, "inverse"), 0.0)


# ------------------------------------------------------------------------ MLP


class MLPBaseline:
    """Shared dense network forecasting each destination channel from its own history.

    For channel ``d`` the input is the flattened ``n x H x W`` history of
    that channel and the output is the next ``H x W`` map of it.
    """

    kind = "mlp"

    def __init__(self, n: int, H: int, W: int, hidden: Sequence[int] = (128, 128, 64),
                 params: ParamGroup | None = None, seed: int = 0):
        self.n, self.H, self.W = n, H, W
        self.hidden = tuple(hidden)
        widths = (n * H * W,) + self.hidden + (H * W,)
        self.shapes = {}
        for layer, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.shapes[f"mlp.{layer}.w"] = (d_out, d_in)
            self.shapes[f"mlp.{layer}.b"] = (d_out,)
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamGroup({
                k: xavier_init(s, rng) if k.endswith(".w") else np.zeros(s)
                for k, s in self.shapes.items()
            })
        if {k: t.shape for k, t in params.tensors.items()} != self.shapes:
            raise ValueError("parameter set does not match MLP layout")
        self.params = params

    @property
    def depth(self) -> int:
        return len(self.hidden) + 1

    def forward(self, X, M=None) -> T.Tensor:
        """``(B,) n x N x H x W`` windows to ``(B,) 1 x N x H x W`` predictions."""
        X = np.asarray(X, dtype=np.float64)
        batched = X.ndim == 5
        Xb = X if batched else X[None]
        B, n, N, H, W = Xb.shape
        z = T.Tensor(Xb.transpose(0, 2, 1, 3, 4).reshape(B * N, n * H * W))
        for layer in range(self.depth):
            z = T.dense(z, self.params[f"mlp.{layer}.w"], self.params[f"mlp.{layer}.b"])
            z = T.relu(z) if layer < self.depth - 1 else T.tanh(z)
        out = T.reshape(z, (B, 1, N, H, W))
        return out if batched else T.reshape(out, (1, N, H, W))

    def predict(self, X, M=None) -> np.ndarray:
        return self.forward(X, M).data

    def loss(self, X, M, Y) -> T.Tensor:
        from .trainer import euclidean_loss

        return euclidean_loss(self.forward(X, M), Y)

    def config_json(self) -> dict:
        return {"kind": self.kind, "model": {"n": self.n, "H": self.H, "W": self.W,
                                             "hidden": list(self.hidden)}}

    @classmethod
    def from_json(cls, d: dict, params: ParamGroup | None = None, seed: int = 0) -> "MLPBaseline":
        m = d["model"]
        return cls(m["n"], m["H"], m["W"], m["hidden"], params, seed)
