"""Learnable parameter groups, Adam and Glorot-uniform initialisation."""

from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParamGroup(Mapping[str, Tensor]):
    """Ordered ``name -> Tensor`` mapping carrying per-tensor Adam moments."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self.tensors: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(arr, requires_grad=True, op=name)
        self.tensors[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def values_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def copy(self) -> "ParamGroup":
        out = ParamGroup(self.values_dict())
        for k in self.tensors:
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        out.step = self.step
        return out

    def check_consistent(self) -> None:
        for k, t in self.tensors.items():
            if self.m[k].shape != t.shape or self.v[k].shape != t.shape:
                raise ValueError(f"Adam moments for {k!r} do not match shape {t.shape}")


def adam_step(
    params: ParamGroup,
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamGroup:
    """One bias-corrected Adam update, in place.  Returns ``params``."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, t in params.tensors.items():
        g = grads[name]
        if g.shape != t.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {t.shape}")
    params.step += 1
    bc1 = 1.0 - beta1**params.step
    bc2 = 1.0 - beta2**params.step
    for name, t in params.tensors.items():
        g = grads[name]
        m, v = params.m[name], params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


def fans(shape: tuple[int, ...]) -> tuple[int, int]:
    """Glorot fan-in/fan-out: dense ``(out, in)``, conv ``(out, in, k, k)``."""
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_init(shape, rng_seed) -> np.ndarray:
    """Uniform samples in ``[-L, L]`` with ``L = sqrt(6 / (fan_in + fan_out))``.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("xavier_init needs a non-empty shape")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    fan_in, fan_out = fans(shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
