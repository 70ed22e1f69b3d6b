"""Contextualized spatial-temporal network for OD demand.

Three stages, each a pure function of ``(inputs, params, config)``:

* local spatial context: two conv stacks, one over the OD tensor (origin
  view) and one over its DO transpose (destination view), fused by a conv;
* temporal evolution: per-interval weather embedding tiled over the grid,
  fused with the local features and fed through a peephole ConvLSTM;
* global correlation: region-to-region similarity (column softmax of
  embedded dot products) mixes every region's features into every other.

All functions take an optional leading batch axis.  Window inputs are
``(B,) n x N x H x W`` normalised demand and ``(B,) n x D`` weather.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .optim import ParamGroup, xavier_init
from .tensor import Tensor

GATES = ("i", "f", "c", "o")
PEEPHOLE_GATES = ("i", "f", "o")


@dataclass(frozen=True)
class CSTNConfig:
    H: int
    W: int
    n: int = 5
    m: int = 1
    K: int = 3
    lsc_channels: int = 16
    fuse_channels: int = 32
    lstm_channels: int = 32
    c_lt: int = 75
    c_s: int = 64
    meteo_dim: int = 29
    meteo_hidden: tuple[int, int] = (64, 16)
    meteo_embed: int = 8
    kernel: int = 3
    tec_enabled: bool = True
    gcc_enabled: bool = True
    destination_view_enabled: bool = True
    meteo_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "meteo_hidden", tuple(self.meteo_hidden))
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v < 1:
                raise ValueError(f"CSTNConfig.{f.name} must be positive, got {v}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.m > 1 and not self.tec_enabled:
            raise ValueError("multi-step decoding needs the temporal module")

    @property
    def N(self) -> int:
        return self.H * self.W

    def to_json(self) -> dict:
        d = asdict(self)
        d["meteo_hidden"] = list(self.meteo_hidden)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CSTNConfig":
        return cls(**d)


def param_shapes(cfg: CSTNConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable array, in initialisation order."""
    k, N, H, W = cfg.kernel, cfg.N, cfg.H, cfg.W
    L = cfg.lstm_channels
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, c_out, c_in, size):
        shapes[f"{name}.w"] = (c_out, c_in, size, size)
        shapes[f"{name}.b"] = (c_out,)

    views = ("o", "d") if cfg.destination_view_enabled else ("o",)
    for v in views:
        c_in = N
        for layer in range(cfg.K):
            conv(f"lsc.{v}.{layer}", cfg.lsc_channels, c_in, k)
            c_in = cfg.lsc_channels
    conv("lsc.od", cfg.fuse_channels, cfg.lsc_channels * len(views), k)

    if cfg.meteo_enabled:
        d_in = cfg.meteo_dim
        for layer, d_out in enumerate(cfg.meteo_hidden + (cfg.meteo_embed,)):
            shapes[f"tec.mlp.{layer}.w"] = (d_out, d_in)
            shapes[f"tec.mlp.{layer}.b"] = (d_out,)
            d_in = d_out
        conv("tec.lm", cfg.fuse_channels, cfg.fuse_channels + cfg.meteo_embed, k)
    else:
        conv("tec.lm", cfg.fuse_channels, cfg.fuse_channels, k)

    def lstm(prefix, c_in):
        for g in GATES:
            shapes[f"{prefix}.w_x{g}"] = (L, c_in, k, k)
            shapes[f"{prefix}.w_h{g}"] = (L, L, k, k)
        for g in PEEPHOLE_GATES:
            shapes[f"{prefix}.w_c{g}"] = (L, H, W)
        for g in GATES:
            shapes[f"{prefix}.b_{g}"] = (L,)

    if cfg.tec_enabled:
        lstm("tec.lstm", cfg.fuse_channels)
        conv("tec.lt", cfg.c_lt, L, 1)
    else:
        conv("tec.lt", cfg.c_lt, cfg.fuse_channels, 1)

    if cfg.gcc_enabled:
        conv("gcc.s", cfg.c_s, cfg.c_lt, 1)
        conv("gcc.head", N, 2 * cfg.c_lt, 1)
    else:
        conv("gcc.head", N, cfg.c_lt, 1)

    if cfg.m > 1:
        conv("dec.proj", cfg.fuse_channels, L, 1)
        lstm("dec.lstm", cfg.fuse_channels)
    return shapes


def init_params(cfg: CSTNConfig, seed: int = 0) -> ParamGroup:
    """Xavier-uniform filters and dense weights; zero biases and peepholes."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "w" or leaf.startswith("w_x") or leaf.startswith("w_h"):
            arrays[name] = xavier_init(shape, rng)
        else:
            arrays[name] = np.zeros(shape)
    return ParamGroup(arrays)


# ----------------------------------------------------------------- helpers


def _conv(x: Tensor, params, name: str) -> Tensor:
    return T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"])


def _do_view(x: Tensor) -> Tensor:
    """Autodiff-aware OD -> DO transpose over the last three axes."""
    lead = x.shape[:-3]
    N, H, W = x.shape[-3:]
    mat = T.reshape(x, lead + (N, N))
    return T.reshape(T.swapaxes(mat, -1, -2), lead + (N, H, W))


def _stack_view(x: Tensor, params, view: str, K: int) -> Tensor:
    for layer in range(K):
        x = T.relu(_conv(x, params, f"lsc.{view}.{layer}"))
    return x


# -------------------------------------------------------------- components


def lsc_forward(X, params, cfg: CSTNConfig, trace: dict | None = None) -> Tensor:
    """Local spatial feature from one (or a batch of) OD tensor(s)."""
    X = T.as_tensor(X)
    if X.shape[-3] != cfg.N:
        raise ValueError(f"OD tensor has {X.shape[-3]} channels, grid needs {cfg.N}")
    f_o = _stack_view(X, params, "o", cfg.K)
    if cfg.destination_view_enabled:
        f_d = _stack_view(_do_view(X), params, "d", cfg.K)
        both = T.concat_channels(f_o, f_d)
    else:
        f_d, both = None, f_o
    f_l = _conv(both, params, "lsc.od")
    if trace is not None:
        trace.update(F_o=f_o, F_d=f_d, F_l=f_l)
    return f_l


def meteo_embed(M, params, cfg: CSTNConfig) -> Tensor:
    z = T.as_tensor(M)
    if z.shape[-1] != cfg.meteo_dim:
        raise ValueError(f"weather vector has {z.shape[-1]} entries, expected {cfg.meteo_dim}")
    depth = len(cfg.meteo_hidden) + 1
    for layer in range(depth):
        z = T.dense(z, params[f"tec.mlp.{layer}.w"], params[f"tec.mlp.{layer}.b"])
        if layer < depth - 1:
            z = T.relu(z)
    return z


def meteo_embed_fuse(F_l, M, params, cfg: CSTNConfig, trace: dict | None = None) -> Tensor:
    """Tile the weather embedding over the grid and fuse it with ``F_l``."""
    F_l = T.as_tensor(F_l)
    if not cfg.meteo_enabled:
        return _conv(F_l, params, "tec.lm")
    e = meteo_embed(M, params, cfg)
    lead = e.shape[:-1]
    f_m = T.broadcast_to(T.reshape(e, lead + (cfg.meteo_embed, 1, 1)),
                         lead + (cfg.meteo_embed, cfg.H, cfg.W))
    f_lm = _conv(T.concat_channels(F_l, f_m), params, "tec.lm")
    if trace is not None:
        trace.update(F_m=f_m, F_lm=f_lm)
    return f_lm


def zero_state(cfg: CSTNConfig, lead: tuple[int, ...] = ()) -> tuple[Tensor, Tensor]:
    shape = lead + (cfg.lstm_channels, cfg.H, cfg.W)
    return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))


def convlstm_step(x, state, params, prefix: str = "tec.lstm") -> tuple[Tensor, Tensor]:
    """One peephole ConvLSTM update; returns ``(h, c)``.

    The output gate peeks at the updated cell, the input and forget gates at
    the previous one.
    """
    x = T.as_tensor(x)
    h, c = state
    if x.shape[-2:] != h.shape[-2:] or h.shape != c.shape:
        raise ValueError(f"ConvLSTM input {x.shape} and state {h.shape}/{c.shape} disagree")
    p = params

    def pre(g):
        return T.conv2d(x, p[f"{prefix}.w_x{g}"], p[f"{prefix}.b_{g}"]) + T.conv2d(h, p[f"{prefix}.w_h{g}"], None)

    i = T.sigmoid(pre("i") + T.mul(p[f"{prefix}.w_ci"], c))
    f = T.sigmoid(pre("f") + T.mul(p[f"{prefix}.w_cf"], c))
    c_new = T.mul(f, c) + T.mul(i, T.tanh(pre("c")))
    o = T.sigmoid(pre("o") + T.mul(p[f"{prefix}.w_co"], c_new))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


def _per_step_features(X, M, params, cfg, trace):
    """Local+weather features for every input interval, batched over time."""
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    M = np.asarray(M.data if isinstance(M, Tensor) else M, dtype=np.float64)
    lead, n = X.shape[:-4], X.shape[-4]
    flat_X = X.reshape((-1,) + X.shape[-3:])
    flat_M = M.reshape((-1, M.shape[-1]))
    step_trace = {} if trace is not None else None
    f_l = lsc_forward(flat_X, params, cfg, step_trace)
    f_lm = meteo_embed_fuse(f_l, flat_M, params, cfg, step_trace)
    if trace is not None:
        for key, val in step_trace.items():
            if val is not None:
                trace[key] = T.reshape(val, lead + (n,) + val.shape[1:])
    f_lm = T.reshape(f_lm, lead + (n,) + f_lm.shape[1:])
    return f_lm, len(lead)


def tec_forward(X, M, params, cfg: CSTNConfig, trace: dict | None = None):
    """Encode ``n`` intervals; returns ``(F_lt, (h, c))``.

    With the temporal module disabled, the last interval's fused feature goes
    straight to the output conv and the state is ``None``.
    """
    f_lm, time_axis = _per_step_features(X, M, params, cfg, trace)
    n = f_lm.shape[time_axis]
    if not cfg.tec_enabled:
        last = T.take(f_lm, n - 1, axis=time_axis)
        return _conv(last, params, "tec.lt"), None
    state = zero_state(cfg, f_lm.shape[:time_axis])
    for step in range(n):
        state = convlstm_step(T.take(f_lm, step, axis=time_axis), state, params)
    f_lt = _conv(state[0], params, "tec.lt")
    if trace is not None:
        trace.update(h=state[0], c=state[1], F_lt=f_lt)
    return f_lt, state


def gcc_forward(F_lt, params, cfg: CSTNConfig, trace: dict | None = None) -> Tensor:
    """Concatenate ``F_lt`` with its similarity-weighted global mix."""
    F_lt = T.as_tensor(F_lt)
    if not cfg.gcc_enabled:
        return F_lt
    lead = F_lt.shape[:-3]
    c_lt, H, W = F_lt.shape[-3:]
    N = H * W
    f_s = T.reshape(_conv(F_lt, params, "gcc.s"), lead + (cfg.c_s, N))
    S = T.softmax_columns(T.matmul(T.swapaxes(f_s, -1, -2), f_s))
    f_g = T.reshape(T.matmul(T.reshape(F_lt, lead + (c_lt, N)), S), lead + (c_lt, H, W))
    f_ltg = T.concat_channels(F_lt, f_g)
    if trace is not None:
        trace.update(F_s=f_s, S=S, F_g=f_g, F_ltg=f_ltg)
    return f_ltg


def predict_head(F_ltg, params) -> Tensor:
    return T.tanh(_conv(T.as_tensor(F_ltg), params, "gcc.head"))


def cstn_forward(X, M, params, cfg: CSTNConfig, trace: dict | None = None) -> Tensor:
    """Next-interval prediction in normalised units, shape ``(B,) N x H x W``."""
    f_lt, _ = tec_forward(X, M, params, cfg, trace)
    if trace is not None:
        trace["F_lt"] = f_lt
    out = predict_head(gcc_forward(f_lt, params, cfg, trace), params)
    if trace is not None:
        trace["X_hat"] = out
    return out


def lcstn_forward(X, M, params, cfg: CSTNConfig, m: int | None = None) -> list[Tensor]:
    """``m`` successive predictions from one encoded window.

    The first comes straight off the encoder's final hidden state; each
    later one follows one more step of the shared decoder ConvLSTM, whose
    input is the previous hidden state projected back to input width.  All
    steps reuse the output conv, similarity module and regression head.
    """
    m = cfg.m if m is None else m
    if m < 1:
        raise ValueError("m must be at least 1")
    if not cfg.tec_enabled:
        raise ValueError("multi-step decoding needs the temporal module")
    _, state = tec_forward(X, M, params, cfg)
    preds = []
    for step in range(m):
        if step:
            x = _conv(state[0], params, "dec.proj")
            state = convlstm_step(x, state, params, prefix="dec.lstm")
        f_lt = _conv(state[0], params, "tec.lt")
        preds.append(predict_head(gcc_forward(f_lt, params, cfg), params))
    return preds


# -------------------------------------------------------------------- model


class CSTN:
    """Parameters plus config; the unit the trainer optimises."""

    kind = "cstn"

    def __init__(self, cfg: CSTNConfig, params: ParamGroup | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        expected = param_shapes(cfg)
        got = {k: t.shape for k, t in self.params.tensors.items()}
        if got != expected:
            raise ValueError("parameter set does not match configuration")

    def forward(self, X, M) -> Tensor:
        """Stacked predictions ``(B,) m x N x H x W``."""
        if self.cfg.m == 1:
            out = cstn_forward(X, M, self.params, self.cfg)
            lead = out.shape[:-3]
            return T.reshape(out, lead + (1,) + out.shape[-3:])
        preds = lcstn_forward(X, M, self.params, self.cfg)
        return T.stack(preds, axis=preds[0].ndim - 3)

    def predict(self, X, M) -> np.ndarray:
        return self.forward(X, M).data

    def loss(self, X, M, Y) -> Tensor:
        from .trainer import euclidean_loss

        return euclidean_loss(self.forward(X, M), Y)

    def config_json(self) -> dict:
        return {"kind": self.kind, "model": self.cfg.to_json()}
