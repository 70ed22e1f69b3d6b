"""Dense float64 tensors with a per-forward operation tape.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them.  :func:`backward`
walks the recorded graph in reverse topological order.  The graph is built
fresh on every forward pass and discarded afterwards.

Spatial ops accept an optional leading batch axis: ``conv2d`` works on
``C x H x W`` or ``B x C x H x W``, ``dense`` on ``D`` or ``B x D`` and
``softmax_columns``/``matmul`` on matrices or stacks of matrices.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __neg__ = lambda self: mul(self, -1.0)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in out.parents)
    out.backward_fn = backward_fn if out.requires_grad else None
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    """Broadcasting elementwise product."""
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), back, "mul")


def hadamard(a, b) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    out = mul(a, b)
    out.op = "hadamard"
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        x._accumulate(g * mask)

    return _node(x.data * mask, (x,), back, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        x._accumulate(g * y * (1.0 - y))

    return _node(y, (x,), back, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def back(g):
        x._accumulate(g * (1.0 - y * y))

    return _node(y, (x,), back, "tanh")


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def square(x: Tensor) -> Tensor:
    def back(g):
        x._accumulate(2.0 * g * x.data)

    return _node(x.data * x.data, (x,), back, "square")


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    shape = x.shape

    def back(g):
        x._accumulate(np.broadcast_to(g, shape))

    return _node(np.asarray(x.data.sum()), (x,), back, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = mul(total(x), 1.0 / n)
    out.op = "mean"
    return out


# -------------------------------------------------------------------- shapes


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def back(g):
        x._accumulate(g.reshape(old))

    return _node(x.data.reshape(shape), (x,), back, "reshape")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    def back(g):
        x._accumulate(np.swapaxes(g, a1, a2))

    return _node(np.swapaxes(x.data, a1, a2), (x,), back, "swapaxes")


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape

    def back(g):
        x._accumulate(_unbroadcast(g, old))

    return _node(np.broadcast_to(x.data, shape), (x,), back, "broadcast")


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(data, tensors, back, "concat")


def concat_channels(a, b) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis (third from the end)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 3 or b.ndim < 3 or a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    out = concat([a, b], axis=a.ndim - 3)
    out.op = "concat_channels"
    return out


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Basic-index a single position along ``axis`` (drops that axis)."""
    idx = [slice(None)] * x.ndim
    idx[axis] = index
    idx = tuple(idx)

    def back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accumulate(full)

    return _node(x.data[idx], (x,), back, "take")


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    out = concat(expanded, axis=axis)
    out.op = "stack"
    return out


# ---------------------------------------------------------------- linear ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), back, "matmul")


def dense(x, weights, bias) -> Tensor:
    """Affine map ``W x + b`` for ``x`` of shape ``D_in`` or ``B x D_in``."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    d_out, d_in = weights.shape
    if x.shape[-1] != d_in or bias.shape != (d_out,):
        raise ValueError(
            f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape} disagree"
        )
    xd = x.data
    y = xd @ weights.data.T + bias.data

    def back(g):
        if x.requires_grad:
            x._accumulate(g @ weights.data)
        if weights.requires_grad:
            g2 = g.reshape(-1, d_out)
            weights._accumulate(g2.T @ xd.reshape(-1, d_in))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d_out).sum(axis=0))

    return _node(y, (x, weights, bias), back, "dense")


_GATHER_LIMIT = 1024
_gather_cache: dict[tuple[int, int, int], np.ndarray] = {}


def _gather_matrix(H: int, W: int, k: int) -> np.ndarray:
    """0/1 matrix mapping a flattened ``H x W`` map to its ``k*k*H*W`` zero-padded patches."""
    key = (H, W, k)
    if key not in _gather_cache:
        p = (k - 1) // 2
        P = np.zeros((k, k, H, W, H * W))
        for a in range(k):
            for b in range(k):
                for i in range(H):
                    for j in range(W):
                        si, sj = i + a - p, j + b - p
                        if 0 <= si < H and 0 <= sj < W:
                            P[a, b, i, j, si * W + sj] = 1.0
        _gather_cache[key] = P.reshape(k * k * H * W, H * W)
    return _gather_cache[key]


def _im2col(xb: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded patches as a ``(C*k*k) x (H*W*B)`` matrix (batch fastest)."""
    B, C, H, W = xb.shape
    xt = xb.transpose(1, 2, 3, 0).reshape(C, H * W, B)
    if k == 1:
        return xt.reshape(C, H * W * B)
    if H * W <= _GATHER_LIMIT:
        return (_gather_matrix(H, W, k) @ xt).reshape(C * k * k, H * W * B)
    p = (k - 1) // 2
    xp = np.zeros((C, H + 2 * p, W + 2 * p, B))
    xp[:, p : p + H, p : p + W] = xt.reshape(C, H, W, B)
    cols = np.empty((C, k, k, H, W, B))
    for a in range(k):
        for b in range(k):
            cols[:, a, b] = xp[:, a : a + H, b : b + W]
    return cols.reshape(C * k * k, H * W * B)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`, returning ``B x C x H x W``."""
    B, C, H, W = shape
    if k == 1:
        xt = cols.reshape(C, H, W, B)
    elif H * W <= _GATHER_LIMIT:
        xt = (_gather_matrix(H, W, k).T @ cols.reshape(C, k * k * H * W, B)).reshape(C, H, W, B)
    else:
        p = (k - 1) // 2
        cols = cols.reshape(C, k, k, H, W, B)
        xp = np.zeros((C, H + 2 * p, W + 2 * p, B))
        for a in range(k):
            for b in range(k):
                xp[:, a : a + H, b : b + W] += cols[:, a, b]
        xt = xp[:, p : p + H, p : p + W]
    return xt.transpose(3, 0, 1, 2)


def conv2d(x, weights, bias) -> Tensor:
    """Stride-1 "same" cross-correlation with zero padding plus channel bias.

    ``weights`` is ``C_out x C_in x k x k`` with odd ``k``; ``bias`` may be None.
    """
    x, weights = as_tensor(x), as_tensor(weights)
    bias = None if bias is None else as_tensor(bias)
    c_out, c_in, k, k2 = weights.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or x.shape[-3] != c_in:
        raise ValueError(
            f"conv2d: input {x.shape} does not match weights expecting {c_in} channels"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    xb = x.data if batched else x.data[None]
    B, _, H, W = xb.shape
    cols = _im2col(xb, k)
    wm = weights.data.reshape(c_out, -1)
    ym = wm @ cols
    if bias is not None:
        ym += bias.data[:, None]
    y = np.ascontiguousarray(ym.reshape(c_out, H, W, B).transpose(3, 0, 1, 2))

    def back(g):
        gm = (g if batched else g[None]).transpose(1, 2, 3, 0).reshape(c_out, H * W * B)
        if weights.requires_grad:
            weights._accumulate((gm @ cols.T).reshape(weights.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=1))
        if x.requires_grad:
            gx = _col2im(wm.T @ gm, xb.shape, k)
            x._accumulate(gx if batched else gx[0])

    parents = (x, weights) if bias is None else (x, weights, bias)
    return _node(y if batched else y[0], parents, back, "conv2d")


def softmax_columns(x) -> Tensor:
    """Softmax down each column (axis -2) of a matrix or stack of matrices."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-2, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-2, keepdims=True)

    def back(g):
        x._accumulate(y * (g - (g * y).sum(axis=-2, keepdims=True)))

    return _node(y, (x,), back, "softmax_columns")


# ------------------------------------------------------------------ backward


def topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, wrt: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Leaves accumulate into ``.grad``.  When ``wrt`` is given, returns a
    ``name -> gradient`` record covering every entry, with exact zeros for
    tensors the loss does not depend on.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if wrt is not None:
        for t in wrt.values():
            t.grad = None
    order = topo_order(loss)
    for node in order:
        if node.parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
            # interior gradients are no longer needed
            node.grad = None
    if wrt is None:
        return {}
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in wrt.items()
    }


def first_nonfinite(root: Tensor) -> Tensor | None:
    """Earliest node (in evaluation order) holding a NaN or Inf."""
    for node in topo_order(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return None
