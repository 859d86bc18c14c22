"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is sized for small recurrent grid agents: broadcast arithmetic,
(batched) matmul, channelwise 1x1 convolution, sigmoid/tanh/relu, stable
softmax, temporal mean-pool downsampling, shape ops and basic indexing,
plus an LSTM cell and multi-head attention assembled from those pieces.

Each op records a backward closure on its output; ``backward(loss)`` runs
one reverse topological sweep from a scalar loss. A second sweep from the
same loss without rebuilding the graph is an error.
"""
from __future__ import annotations

import json
from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Array node in the autodiff graph.

    Leaves created with ``requires_grad=True`` get a zero-initialized grad
    buffer, so parameters unreachable from a loss report zero gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_swept")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._backward = None
        self._prev = ()
        self._swept = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def item(self) -> float:
        return self.data.item()


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    """Output tensor for an op; tracks grad only when enabled and needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None  # allocated lazily during the sweep
        out._prev = tuple(p for p in parents if p.requires_grad)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; populates .grad on reachable leaves.

    Raises if the loss is not scalar or if this loss was already swept
    (accumulating twice over one graph is almost always a bug).
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._swept:
        raise RuntimeError("backward already ran for this loss; rebuild the graph")
    loss._swept = True

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = np.zeros_like(t.data) if t.requires_grad else None


# -- arithmetic -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data + b.data, (a, b))

    def _bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    if out.requires_grad:
        out._backward = _bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data - b.data, (a, b))

    def _bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    if out.requires_grad:
        out._backward = _bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data * b.data, (a, b))

    def _bwd(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    if out.requires_grad:
        out._backward = _bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched over leading dims like np.matmul."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")
    out = _node(np.matmul(a.data, b.data), (a, b))

    def _bwd(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        if b.requires_grad:
            _accum(b, np.matmul(a.data.swapaxes(-1, -2), g))

    if out.requires_grad:
        out._backward = _bwd
    return out


# -- nonlinearities --------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = _node(s, (x,))

    def _bwd(g):
        _accum(x, g * s * (1.0 - s))

    if out.requires_grad:
        out._backward = _bwd
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = _node(t, (x,))

    def _bwd(g):
        _accum(x, g * (1.0 - t * t))

    if out.requires_grad:
        out._backward = _bwd
    return out


def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0.0), (x,))

    def _bwd(g):
        _accum(x, g * (x.data > 0.0))

    if out.requires_grad:
        out._backward = _bwd
    return out


def stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array softmax with max subtraction; shared by policy code."""
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = stable_softmax(x.data, axis=axis)
    out = _node(s, (x,))

    def _bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(x, s * (g - dot))

    if out.requires_grad:
        out._backward = _bwd
    return out


# -- reductions and shape ops ----------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _node(x.data.sum(axis=axis, keepdims=keepdims), (x,))

    def _bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))

    if out.requires_grad:
        out._backward = _bwd
    return out


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.data.shape[axis]
    out = _node(x.data.mean(axis=axis, keepdims=keepdims), (x,))

    def _bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape) / n)

    if out.requires_grad:
        out._backward = _bwd
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _node(x.data.reshape(shape), (x,))

    def _bwd(g):
        _accum(x, g.reshape(x.data.shape))

    if out.requires_grad:
        out._backward = _bwd
    return out


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = _node(x.data.transpose(axes), (x,))

    def _bwd(g):
        _accum(x, g.transpose(inv))

    if out.requires_grad:
        out._backward = _bwd
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    if out.requires_grad:
        out._backward = _bwd
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors))

    def _bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    if out.requires_grad:
        out._backward = _bwd
    return out


def getitem(x: Tensor, idx) -> Tensor:
    out = _node(x.data[idx], (x,))

    def _bwd(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        _accum(x, buf)

    if out.requires_grad:
        out._backward = _bwd
    return out


# -- domain ops --------------------------------------------------------------


def conv1x1(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-pixel channel mixing: (..., C, H, W) x (O, C) -> (..., O, H, W)."""
    if kernel.ndim != 2:
        raise ValueError(f"conv1x1 kernel must be (out_channels, in_channels), got {kernel.shape}")
    if x.ndim < 3 or x.data.shape[-3] != kernel.data.shape[1]:
        raise ValueError(f"conv1x1 channel mismatch: input {x.shape}, kernel {kernel.shape}")
    out = _node(np.einsum("oc,...chw->...ohw", kernel.data, x.data), (x, kernel))

    def _bwd(g):
        if x.requires_grad:
            _accum(x, np.einsum("oc,...ohw->...chw", kernel.data, g))
        if kernel.requires_grad:
            g_flat = g.reshape((-1,) + g.shape[-3:])
            x_flat = x.data.reshape((-1,) + x.data.shape[-3:])
            _accum(kernel, np.einsum("nohw,nchw->oc", g_flat, x_flat))

    if out.requires_grad:
        out._backward = _bwd
    return out


def downsample(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling over the time axis (-2).

    (..., T, D) -> (..., ceil(T/factor), D); a remainder window averages
    whatever rows are left.
    """
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    t_len = x.data.shape[-2]
    starts = np.arange(0, t_len, factor)
    counts = np.minimum(starts + factor, t_len) - starts
    pooled = np.add.reduceat(x.data, starts, axis=-2) / counts[:, None]
    out = _node(pooled, (x,))

    def _bwd(g):
        _accum(x, np.repeat(g / counts[:, None], counts, axis=-2))

    if out.requires_grad:
        out._backward = _bwd
    return out


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: "LstmCellParams"):
    """One step of a standard LSTM: returns (h, c), both (B, hidden)."""
    hid = params.hidden_size
    if x.data.shape[-1] != params.input_size:
        raise ValueError(f"lstm_cell input size {x.data.shape[-1]} != {params.input_size}")
    if h_prev.data.shape[-1] != hid or c_prev.data.shape[-1] != hid:
        raise ValueError("lstm_cell state size mismatch")
    pre = matmul(concat([x, h_prev], axis=-1), params.w) + params.b
    i = sigmoid(pre[:, 0 * hid:1 * hid])
    f = sigmoid(pre[:, 1 * hid:2 * hid])
    g = tanh(pre[:, 2 * hid:3 * hid])
    o = sigmoid(pre[:, 3 * hid:4 * hid])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


class LstmCellParams:
    """Gate weights for one LSTM cell, stored as a fused (in+hid, 4*hid) matrix.

    Gate order along the fused axis: input, forget, candidate, output.
    The forget-gate bias initializes to 1.0 so early training keeps memory.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.input_size = input_size
        self.hidden_size = hidden_size
        bound = np.sqrt(3.0 / (input_size + hidden_size))
        self.w = Tensor(rng.uniform(-bound, bound, (input_size + hidden_size, 4 * hidden_size)),
                        requires_grad=True)
        bias = np.zeros(4 * hidden_size)
        bias[hidden_size:2 * hidden_size] = 1.0
        self.b = Tensor(bias, requires_grad=True)

    def tensors(self) -> list[Tensor]:
        return [self.w, self.b]


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1,
                         scale: float | None = None, w_out: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention with head split along the feature axis.

    q: (B, Tq, D), k/v: (B, Tk, D). Scores are softmax(q k^T * scale) per
    head; the default scale is 1/d_head (linear, not inverse-sqrt). Heads
    are concatenated back to D and, when ``w_out`` is given, projected.
    """
    b, tq, d = q.data.shape
    tk = k.data.shape[-2]
    if d % heads != 0:
        raise ValueError(f"feature dim {d} not divisible by {heads} heads")
    dh = d // heads
    if scale is None:
        scale = 1.0 / dh

    def split(t, tlen):
        return transpose(reshape(t, (b, tlen, heads, dh)), (0, 2, 1, 3))  # (B, H, T, dh)

    qh, kh, vh = split(q, tq), split(k, tk), split(v, tk)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), _wrap(scale))  # (B, H, Tq, Tk)
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, vh)  # (B, H, Tq, dh)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
    if w_out is not None:
        merged = matmul(merged, w_out)
    return merged


# -- parameter helpers -------------------------------------------------------


def uniform_init(shape, fan_in: int, rng: np.random.Generator,
                 gain: float = 1.0) -> Tensor:
    """Uniform init with variance gain^2 / fan_in (Glorot at gain 1).

    U(-b, b) has variance b^2/3, so b = gain * sqrt(3 / fan_in) keeps the
    per-layer output variance at gain^2 times the input variance. Use
    gain sqrt(2) in front of relu to compensate the halved variance.
    """
    bound = gain * np.sqrt(3.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def global_norm(tensors) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    return float(np.sqrt(total))


# -- checkpoint container -----------------------------------------------------

FORMAT_VERSION = 1


def save_tensors(path, named: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays plus a JSON metadata blob; bit-exact on load."""
    payload = {name: np.asarray(arr, dtype=np.float64) for name, arr in named.items()}
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta or {}}, sort_keys=True)
    np.savez(path, __header__=np.array(header), **payload)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {header.get('format_version')}")
        arrays = {name: z[name] for name in z.files if name != "__header__"}
    return arrays, header["meta"]
