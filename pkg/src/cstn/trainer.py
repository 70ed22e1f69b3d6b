"""Minibatch Adam training with step-decayed learning rate, and checkpoints.

Checkpoint files use the container layout in :mod:`cstn.container` with
magic ``b"CSTNCKPT"``.  The header JSON carries::

    config   {"kind": ..., "model": {...}}   (digested into the prefix)
    train    TrainConfig fields
    norm     NormStats or null
    epoch    completed epochs
    adam_step, rng_state, history (per-epoch mean loss)

and the payload holds ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>``
for every parameter in model order.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import container
from . import tensor as T
from .data import NormStats, SampleWindow, stack_windows
from .errors import NumericalAbort, ShapeMismatchError
from .optim import ParamGroup, adam_step

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CSTNCKPT"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 1e-4
    decay_factor: float = 0.1
    decay_every: int = 200
    epochs: int = 700
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.epochs < 1 or self.decay_every < 1:
            raise ValueError("epochs and decay_every must be >= 1")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.base_lr * cfg.decay_factor ** (epoch // cfg.decay_every)


def euclidean_loss(pred, target) -> T.Tensor:
    """Mean squared difference over every entry (and every decoded step)."""
    pred = T.as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, T.Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"loss: prediction {pred.shape} vs target {target.shape}")
    return T.mean(T.square(T.sub(pred, target)))


@dataclass
class Checkpoint:
    model_config: dict
    params: ParamGroup
    train: TrainConfig
    norm: NormStats | None = None
    epoch: int = 0
    rng_state: dict | None = None
    history: list[float] = field(default_factory=list)

    def build_model(self):
        return build_model(self.model_config, self.params)


def build_model(model_config: dict, params: ParamGroup | None = None, seed: int = 0):
    kind = model_config.get("kind")
    if kind == "cstn":
        from .model import CSTN, CSTNConfig

        return CSTN(CSTNConfig.from_json(model_config["model"]), params, seed)
    if kind == "mlp":
        from .baselines import MLPBaseline

        return MLPBaseline.from_json(model_config, params, seed)
    raise ValueError(f"unknown model kind {kind!r}")


def train(model, windows: Sequence[SampleWindow], cfg: TrainConfig,
          progress: Callable[[int, float, float], None] | None = None,
          norm: NormStats | None = None, resume: Checkpoint | None = None) -> Checkpoint:
    """Optimise ``model.params`` in place and return the final checkpoint.

    ``progress(epoch, lr, mean_loss)`` is called once per epoch.  With
    ``resume``, parameters, Adam state, RNG and epoch counter continue from
    the checkpoint (its parameters are copied into ``model``).
    """
    if not windows:
        raise ValueError("no training windows")
    X, M, Y = stack_windows(windows)
    rng = np.random.default_rng(cfg.seed)
    start, history = 0, []
    if resume is not None:
        _load_into(model.params, resume.params)
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        start, history = resume.epoch, list(resume.history)
        norm = norm if norm is not None else resume.norm
    count = len(X)
    for epoch in range(start, cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(count) if cfg.shuffle else np.arange(count)
        running = 0.0
        for lo in range(0, count, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            # overflow is detected below, so numpy's own warnings are redundant
            with np.errstate(over="ignore", invalid="ignore"):
                loss = model.loss(X[idx], M[idx], Y[idx])
                value = float(loss.data)
                if not np.isfinite(value):
                    bad = T.first_nonfinite(loss)
                    where = f"{bad.op} {bad.shape}" if bad is not None else "loss"
                    raise NumericalAbort(f"non-finite loss at epoch {epoch}; first bad tensor: {where}")
                grads = T.backward(loss, model.params)
            adam_step(model.params, grads, lr)
            running += value * len(idx)
        mean_loss = running / count
        history.append(mean_loss)
        log.debug("epoch %d lr %.3g loss %.6g", epoch, lr, mean_loss)
        if progress is not None:
            progress(epoch, lr, mean_loss)
    return Checkpoint(
        model_config=model.config_json(),
        params=model.params.copy(),
        train=cfg,
        norm=norm,
        epoch=max(cfg.epochs, start),
        rng_state=copy.deepcopy(rng.bit_generator.state),
        history=history,
    )


def _load_into(dst: ParamGroup, src: ParamGroup) -> None:
    if list(dst) != list(src):
        raise ShapeMismatchError("checkpoint parameters do not match the model")
    for k in dst:
        dst[k].data[...] = src[k].data
        dst.m[k] = src.m[k].copy()
        dst.v[k] = src.v[k].copy()
    dst.step = src.step


# -------------------------------------------------------------- persistence


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    header = {
        "config": ck.model_config,
        "train": asdict(ck.train),
        "norm": None if ck.norm is None else ck.norm.to_json(),
        "epoch": ck.epoch,
        "adam_step": ck.params.step,
        "rng_state": ck.rng_state,
        "history": ck.history,
    }
    tensors = {}
    for prefix, source in (("param", {k: t.data for k, t in ck.params.tensors.items()}),
                           ("adam_m", ck.params.m), ("adam_v", ck.params.v)):
        for k, arr in source.items():
            tensors[f"{prefix}/{k}"] = arr
    return container.encode(CKPT_MAGIC, CKPT_VERSION, header, tensors)


def save_checkpoint(ck: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    header, tensors = container.read(path, CKPT_MAGIC, CKPT_VERSION)
    try:
        names = [k.split("/", 1)[1] for k in tensors if k.startswith("param/")]
        params = ParamGroup({k: tensors[f"param/{k}"] for k in names})
        for k in names:
            params.m[k] = tensors[f"adam_m/{k}"]
            params.v[k] = tensors[f"adam_v/{k}"]
        params.step = int(header["adam_step"])
        params.check_consistent()
        ck = Checkpoint(
            model_config=header["config"],
            params=params,
            train=TrainConfig(**header["train"]),
            norm=None if header["norm"] is None else NormStats.from_json(header["norm"]),
            epoch=int(header["epoch"]),
            rng_state=header["rng_state"],
            history=list(header["history"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ShapeMismatchError(f"checkpoint contents inconsistent: {exc}") from None
    try:
        ck.build_model()
    except ValueError as exc:
        raise ShapeMismatchError(f"checkpoint parameters do not fit its config: {exc}") from None
    return ck
