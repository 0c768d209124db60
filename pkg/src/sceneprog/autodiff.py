"""Reverse-mode automatic differentiation on numpy arrays.

Every differentiable operation builds a node holding its inputs and a
closure that scatters the output gradient back to them; `backward` walks
the recorded graph once in reverse topological order.  The engine is
deliberately small: dense float tensors, stride-1 convolutions at kernel
sizes 1 and 3, and exactly the primitives the models need.  Models run
in float32; gradient checks rebuild the same graphs in float64.

A tape supports a single backward pass: closures are dropped as they run
so the graph memory is released, and a second `backward` on the same
loss raises.  Operations validate operand shapes eagerly and (behind a
module flag) check outputs for NaN/Inf so numerical faults surface at
the op that produced them, not steps later.
"""
from __future__ import annotations

import contextlib
import json
import zlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NumericsError(ArithmeticError):
    """A non-finite value appeared where finite numbers are required."""


class CheckpointError(ValueError):
    """A checkpoint file that is malformed, truncated, or corrupted."""


_grad_enabled = True
_finite_checks = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf screening (on by default)."""
    global _finite_checks
    _finite_checks = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording the tape."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def _check(data: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by {op}")


class Tensor:
    """A dense array plus the backward edge that produced it."""

    __slots__ = ("data", "grad", "_parents", "_bwd", "req", "_consumed")

    def __init__(self, data, parents=(), bwd=None, req=False):
        if isinstance(data, (np.ndarray, np.generic)):
            self.data = np.asarray(data)  # keep the numpy dtype, 0-d included
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self._parents = parents
        self._bwd = bwd
        self.req = req
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, req={self.req})"

    # Small conveniences; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))


def _as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], bwd) -> Tensor:
    data = np.asarray(data)  # 0-d results come back as numpy scalars
    _check(data, op)
    if _grad_enabled and any(p.req for p in parents):
        return Tensor(data, parents, bwd, req=True)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar loss through the recorded tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this tape")
    loss._consumed = True

    order: list[Tensor] = []
    seen = {id(loss)}
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, i = stack[-1]
        if i < len(node._parents):
            stack[-1] = (node, i + 1)
            parent = node._parents[i]
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, 0))
        else:
            order.append(node)
            stack.pop()

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
            node._bwd = None  # release the tape as it is consumed
            node._parents = ()


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def bwd(g):
        if a.req:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.req:
            _acc(b, _unbroadcast(g, b.data.shape))

    return _node(out, "add", (a, b), bwd)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def bwd(g):
        if a.req:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.req:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, "mul", (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def bwd(g):
        if a.req:
            _acc(a, g * c)

    return _node(out, "scale", (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.req:
            _acc(a, g @ b.data.T)
        if b.req:
            _acc(b, a.data.T @ g)

    return _node(out, "matmul", (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        if x.req:
            _acc(x, g * (x.data > 0))

    return _node(out, "relu", (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bwd(g):
        if x.req:
            _acc(x, g * (1.0 - out * out))

    return _node(out, "tanh", (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        if x.req:
            _acc(x, g * out * (1.0 - out))

    return _node(out, "sigmoid", (x,), bwd)


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def bwd(g):
        if x.req:
            if axis is None:
                _acc(x, np.broadcast_to(g, x.data.shape).copy())
            else:
                _acc(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _node(out, "sum", (x,), bwd)


def mean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        if x.req:
            _acc(x, g.reshape(x.data.shape))

    return _node(out, "reshape", (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, size: int) -> Tensor:
    """A contiguous slice [start, start+size) along one axis."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + size)
    index = tuple(index)
    out = x.data[index].copy()

    def bwd(g):
        if x.req:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[index] += g

    return _node(out, "narrow", (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [t for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.req:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + size)
                _acc(t, g[tuple(index)])
            offset += size

    return _node(out, "concat", tuple(tensors), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding_lookup: index out of range for table of {table.data.shape[0]} rows"
        )
    out = table.data[ids]

    def bwd(g):
        if table.req:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _node(out, "embedding_lookup", (table,), bwd)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Pick one column per row of a 2-D tensor: out[i] = x[i, idx[i]]."""
    idx = np.asarray(idx)
    if x.data.ndim != 2 or idx.shape != (x.data.shape[0],):
        raise ShapeError(f"gather_rows: need (N, V) and (N,), got {x.data.shape} and {idx.shape}")
    rows = np.arange(x.data.shape[0])
    out = x.data[rows, idx]

    def bwd(g):
        if x.req:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, (rows, idx), g)

    return _node(out, "gather_rows", (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bwd(g):
        if x.req:
            p = np.exp(out)
            _acc(x, g - p * g.sum(axis=axis, keepdims=True))

    return _node(out, "log_softmax", (x,), bwd)


def softmax_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean cross-entropy between logits rows and target indices.

    `targets` is an integer vector; `weights` defaults to all-ones and is
    typically a 0/1 mask that drops padded positions from the mean.
    """
    targets = np.asarray(targets)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: targets {targets.shape} do not match {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"softmax_cross_entropy: target index outside {v} classes")
    w = np.ones(n, dtype=logits.data.dtype) if weights is None else np.asarray(weights, logits.data.dtype)
    total = w.sum()
    if total <= 0:
        raise ShapeError("softmax_cross_entropy: weights sum to zero")

    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    out = np.asarray(-(w * logp[rows, targets]).sum() / total)

    def bwd(g):
        if logits.req:
            p = np.exp(logp)
            p[rows, targets] -= 1.0
            _acc(logits, (g * w[:, None] / total) * p)

    return _node(out, "softmax_cross_entropy", (logits,), bwd)


# ---------------------------------------------------------------------------
# spatial primitives (single sample: channels x height x width)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 same-padding convolution for kernel sizes 1 and 3.

    x is (C_in, H, W), w is (C_out, C_in, k, k), b is (C_out,).
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need (C,H,W) and (O,C,k,k), got {x.data.shape} and {w.data.shape}")
    c_out, c_in, k, k2 = w.data.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d: unsupported kernel {k}x{k2}")
    if x.data.shape[0] != c_in:
        raise ShapeError(f"conv2d: input has {x.data.shape[0]} channels, kernel expects {c_in}")
    _, h, wd = x.data.shape
    pad = k // 2
    if pad:
        xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad), dtype=x.data.dtype)
        xp[:, pad:-pad, pad:-pad] = x.data
    else:
        xp = x.data

    # Gather the k*k shifted views as columns: cols[c, t] is the input
    # value multiplied by kernel tap t at every output position.
    cols = np.empty((c_in, k * k, h * wd), dtype=x.data.dtype)
    for t in range(k * k):
        di, dj = divmod(t, k)
        cols[:, t, :] = xp[:, di : di + h, dj : dj + wd].reshape(c_in, -1)
    w2 = w.data.reshape(c_out, c_in * k * k)
    out = (w2 @ cols.reshape(c_in * k * k, h * wd)).reshape(c_out, h, wd)
    out = out + b.data[:, None, None]

    def bwd(g):
        g2 = g.reshape(c_out, h * wd)
        if b.req:
            _acc(b, g2.sum(axis=1))
        if w.req:
            _acc(w, (g2 @ cols.reshape(c_in * k * k, h * wd).T).reshape(w.data.shape))
        if x.req:
            dcols = (w2.T @ g2).reshape(c_in, k * k, h, wd)
            gxp = np.zeros_like(xp)
            for t in range(k * k):
                di, dj = divmod(t, k)
                gxp[:, di : di + h, dj : dj + wd] += dcols[:, t]
            _acc(x, gxp[:, pad : pad + h, pad : pad + wd] if pad else gxp)

    return _node(out, "conv2d", (x, w, b), bwd)


def conv2d_batch(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """conv2d over a leading batch axis: (B, C_in, H, W) -> (B, C_out, H, W)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d_batch: need (B,C,H,W) and (O,C,k,k), got {x.data.shape} and {w.data.shape}")
    c_out, c_in, k, k2 = w.data.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d_batch: unsupported kernel {k}x{k2}")
    if x.data.shape[1] != c_in:
        raise ShapeError(f"conv2d_batch: input has {x.data.shape[1]} channels, kernel expects {c_in}")
    n, _, h, wd = x.data.shape
    pad = k // 2
    if pad:
        xp = np.zeros((n, c_in, h + 2 * pad, wd + 2 * pad), dtype=x.data.dtype)
        xp[:, :, pad:-pad, pad:-pad] = x.data
    else:
        xp = x.data

    cols = np.empty((n, c_in, k * k, h * wd), dtype=x.data.dtype)
    for t in range(k * k):
        di, dj = divmod(t, k)
        cols[:, :, t, :] = xp[:, :, di : di + h, dj : dj + wd].reshape(n, c_in, -1)
    cols2 = cols.reshape(n, c_in * k * k, h * wd)
    w2 = w.data.reshape(c_out, c_in * k * k)
    out = (w2[None] @ cols2).reshape(n, c_out, h, wd) + b.data[None, :, None, None]

    def bwd(g):
        g2 = g.reshape(n, c_out, h * wd)
        if b.req:
            _acc(b, g2.sum(axis=(0, 2)))
        if w.req:
            _acc(w, (g2 @ cols2.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape))
        if x.req:
            dcols = (w2.T[None] @ g2).reshape(n, c_in, k * k, h, wd)
            gxp = np.zeros_like(xp)
            for t in range(k * k):
                di, dj = divmod(t, k)
                gxp[:, :, di : di + h, dj : dj + wd] += dcols[:, :, t]
            _acc(x, gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp)

    return _node(out, "conv2d_batch", (x, w, b), bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route their gradient to the
    first maximal position in row-major order."""
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (
        x.data.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    )
    flat_idx = windows.argmax(axis=3)
    out = np.take_along_axis(windows, flat_idx[..., None], axis=3)[..., 0]

    def bwd(g):
        if x.req:
            gw = np.zeros_like(windows)
            np.put_along_axis(gw, flat_idx[..., None], g[..., None], axis=3)
            gx = gw.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
            _acc(x, gx)

    return _node(out, "maxpool2x2", (x,), bwd)


def maxpool2x2_batch(x: Tensor) -> Tensor:
    """maxpool2x2 over a leading batch axis, same tie handling."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2_batch: spatial dims must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    )
    flat_idx = windows.argmax(axis=4)
    out = np.take_along_axis(windows, flat_idx[..., None], axis=4)[..., 0]

    def bwd(g):
        if x.req:
            gw = np.zeros_like(windows)
            np.put_along_axis(gw, flat_idx[..., None], g[..., None], axis=4)
            gx = gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            _acc(x, gx)

    return _node(out, "maxpool2x2_batch", (x,), bwd)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor):
    """One LSTM step over a batch of rows.

    x is (B, D_in), h and c are (B, D); wx (D_in, 4D), wh (D, 4D), b (4D,)
    hold the input/forget/output/candidate gates side by side.  Returns
    the new (h, c).
    """
    d = h.data.shape[1]
    zs = linear(x, wx, b)
    z = add(zs, matmul(h, wh))
    i = sigmoid(narrow(z, 1, 0, d))
    f = sigmoid(narrow(z, 1, d, d))
    o = sigmoid(narrow(z, 1, 2 * d, d))
    g = tanh(narrow(z, 1, 3 * d, d))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def softmax_probs(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain softmax on raw arrays (no tape), for sampling and reports."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# parameters and optimization


class ParamStore:
    """Named trainable tensors plus Adam state, in registration order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def parameter(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype), req=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> dict[str, Tensor]:
        return dict(self._params)

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Accumulated gradients; parameters the loss never touched get zeros."""
        out = {}
        for name, t in self._params.items():
            out[name] = np.zeros_like(t.data) if t.grad is None else t.grad
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise CheckpointError(f"missing parameters: {sorted(missing)[:4]}")
        for name, t in self._params.items():
            a = np.asarray(arrays[name], dtype=self.dtype)
            if a.shape != t.data.shape:
                raise CheckpointError(
                    f"parameter {name!r}: stored shape {a.shape} != expected {t.data.shape}"
                )
            t.data = a.copy()


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update over every parameter in the store.

    Decay is decoupled: applied directly to the weights, not folded into
    the gradient moments. Aborts with NumericsError naming the first
    parameter whose gradient contains NaN or Inf, leaving all parameters
    untouched.
    """
    for name in store.names():
        if not np.all(np.isfinite(grads[name])):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in store.names():
        g = grads[name].astype(store.dtype, copy=False)
        m = store._m.get(name)
        if m is None:
            m = np.zeros_like(g)
            store._m[name] = m
            store._v[name] = np.zeros_like(g)
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p = store[name].data
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# initialization helpers


def glorot(rng, shape, dtype=np.float32) -> np.ndarray:
    """Uniform Glorot init; fans derived from matrix or conv kernel shape."""
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:
        fan_in = fan_out = int(np.prod(shape))
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def small_normal(rng, shape, scale=0.01, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * scale).astype(dtype)


# ---------------------------------------------------------------------------
# checkpoints


_MAGIC = b"SPCK0001"


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays: magic, JSON table, little-endian payload, CRC32."""
    entries = []
    payload = bytearray()
    for name, a in arrays.items():
        a = np.ascontiguousarray(a)
        le = a.dtype.newbyteorder("<")
        entries.append({"name": name, "dtype": le.str, "shape": list(a.shape)})
        payload += a.astype(le, copy=False).tobytes()
    header = json.dumps({"tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        fh.write(payload)
        fh.write(zlib.crc32(bytes(payload)).to_bytes(4, "little"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back; any corruption raises CheckpointError."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint file")
    off = len(_MAGIC)
    hlen = int.from_bytes(blob[off : off + 8], "little")
    off += 8
    try:
        header = json.loads(blob[off : off + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    off += hlen
    payload = blob[off:-4]
    stored_crc = int.from_bytes(blob[-4:], "little")
    if zlib.crc32(payload) != stored_crc:
        raise CheckpointError("checksum mismatch; checkpoint is corrupted")
    out: dict[str, np.ndarray] = {}
    pos = 0
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        chunk = payload[pos : pos + n]
        if len(chunk) != n:
            raise CheckpointError(f"payload truncated at tensor {entry['name']!r}")
        out[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        pos += n
    if pos != len(payload):
        raise CheckpointError("payload has trailing bytes beyond the tensor table")
    return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(fn, tensors, eps: float = 1e-5, max_entries: int | None = None, rng=None) -> float:
    """Compare analytic gradients of `fn` against central differences.

    `fn` rebuilds its graph from the given tensors on every call and
    returns a scalar Tensor.  Returns the worst relative error over all
    checked coordinates (optionally a random subset per tensor).  Run
    this with float64 tensors; float32 rounding swamps the signal.
    """
    for t in tensors:
        t.grad = None  # drop gradients left over from earlier passes
    loss = fn()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.permutation(flat.size)[:max_entries]
        for i in idx:
            saved = flat[i]
            flat[i] = saved + eps
            up = float(fn().data)
            flat[i] = saved - eps
            down = float(fn().data)
            flat[i] = saved
            numeric = (up - down) / (2.0 * eps)
            a = float(ga.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
