"""Dense-tensor numeric core with reverse-mode automatic differentiation.

Values are numpy arrays (float64 by default, float32 via ``set_default_dtype``
for speed runs). Differentiable operations record nodes on an explicit
gradient tape; ``backward`` replays the tape once, in reverse order, and
accumulates gradients into every leaf that requires them.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ValidationError

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValidationError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class TapeNode:
    """One recorded operation: name, output, and a closure that propagates grads."""

    __slots__ = ("op", "out", "backward")

    def __init__(self, op: str, out, backward: Callable[[], None]):
        self.op = op
        self.out = out
        self.backward = backward


class GradientTape:
    """Append-only record of differentiable operations.

    ``mixing_nodes`` counts nodes that backpropagate through architecture
    mixing weights; zeroth-order search paths must never create any.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.mixing_nodes = 0

    def record(self, op: str, out, backward: Callable[[], None]) -> int:
        self.nodes.append(TapeNode(op, out, backward))
        return len(self.nodes) - 1


_active: Optional[GradientTape] = None
_mixing_node_count = 0


def mixing_node_count() -> int:
    """Total mixing-weight gradient nodes recorded since the last reset."""
    return _mixing_node_count


def reset_mixing_node_count() -> None:
    global _mixing_node_count
    _mixing_node_count = 0


def active_tape() -> Optional[GradientTape]:
    return _active


@contextlib.contextmanager
def tape():
    """Open a fresh gradient tape for one forward/backward pass."""
    global _active
    prev = _active
    _active = GradientTape()
    try:
        yield _active
    finally:
        _active = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference / function-value-only evaluation)."""
    global _active
    prev = _active
    _active = None
    try:
        yield
    finally:
        _active = prev


class Tensor:
    """Dense n-dimensional array, optionally tracked by the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small operator sugar used by tests and demos.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(op: str, inputs: Sequence[Tensor], out: Tensor,
            backward: Callable[[], None], mixing: bool = False) -> Tensor:
    t = _active
    if t is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out.tape_id = t.record(op, out, backward)
        if mixing:
            t.mixing_nodes += 1
            global _mixing_node_count
            _mixing_node_count += 1
    return out


def backward(loss: Tensor, on_tape: Optional[GradientTape] = None) -> None:
    """Populate grads of every requires_grad leaf with dLoss/dLeaf.

    Repeated calls accumulate unless grads are zeroed in between.
    """
    t = on_tape if on_tape is not None else _active
    if t is None:
        raise ContractError("backward called with no active gradient tape")
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    # Intermediate (node-output) grads are scratch space for the replay:
    # clear them so a second call does not double-count, while leaf grads
    # survive and accumulate.
    for node in t.nodes:
        node.out.grad = None
    loss._accum(np.ones_like(loss.data))
    for node in reversed(t.nodes):
        node.backward()


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    return _record("add", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _record("mul", (a, b), out, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)

    def bwd():
        if out.grad is not None:
            x._accum(out.grad * c)

    return _record("scale", (x,), out, bwd)


def tsum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def bwd():
        if out.grad is not None:
            x._accum(np.broadcast_to(out.grad, x.data.shape).copy())

    return _record("sum", (x,), out, bwd)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean())

    def bwd():
        if out.grad is not None:
            x._accum(np.broadcast_to(out.grad / n, x.data.shape).copy())

    return _record("mean", (x,), out, bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd():
        if out.grad is not None:
            x._accum((x.data > 0) * out.grad)

    return _record("relu", (x,), out, bwd)


def row(x: Tensor, i: int) -> Tensor:
    """Select row i of a 2-D tensor (used for per-edge alpha rows)."""
    if x.data.ndim != 2:
        raise DimensionError(f"row() expects a 2-D tensor, got ndim={x.data.ndim}")
    out = Tensor(x.data[i].copy())

    def bwd():
        g = out.grad
        if g is None:
            return
        full = np.zeros_like(x.data)
        full[i] = g
        x._accum(full)

    return _record("row", (x,), out, bwd)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dims differ: {a.data.shape[1]} vs {b.data.shape[0]}")
    out = Tensor(a.data @ b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)

    return _record("matmul", (a, b), out, bwd)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x [N,D] @ weight [D,M] (+ bias [M])."""
    if x.data.ndim != 2:
        raise DimensionError(f"linear expects 2-D input, got shape {x.data.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise DimensionError(
            f"linear: input dim {x.data.shape[1]} != weight dim {weight.data.shape[0]}")
    y = x.data @ weight.data
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    def bwd():
        g = out.grad
        if g is None:
            return
        x._accum(g @ weight.data.T)
        weight._accum(x.data.T @ g)
        if bias is not None:
            bias._accum(g.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", inputs, out, bwd)


# ---------------------------------------------------------------------------
# Convolution / pooling
# ---------------------------------------------------------------------------

def _out_dim(size: int, k: int, stride: int, pad: int) -> int:
    o = (size + 2 * pad - k) // stride + 1
    if o < 1:
        raise DimensionError(
            f"spatial size {size} too small for kernel {k}, stride {stride}, pad {pad}")
    return o


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """[N,C,H,W] -> [N, C*kh*kw, Ho*Wo] patch matrix."""
    n, c, h, w = x.shape
    ho = _out_dim(h, kh, stride, pad)
    wo = _out_dim(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = xshape
    ho = _out_dim(h, kh, stride, pad)
    wo = _out_dim(w, kw, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, i, j]
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,C,H,W] with [K,C,kh,kw]."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D NCHW, got shape {x.data.shape}")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-D KCkhkw, got shape {weight.data.shape}")
    n, c, h, w = x.data.shape
    k, cw, kh, kw = weight.data.shape
    if c != cw:
        raise DimensionError(f"conv2d: input channel axis {c} != weight channel axis {cw}")
    cols = _im2col(x.data, kh, kw, stride, padding)
    wm = weight.data.reshape(k, -1)
    ho = _out_dim(h, kh, stride, padding)
    wo = _out_dim(w, kw, stride, padding)
    out = Tensor(np.matmul(wm, cols).reshape(n, k, ho, wo))

    def bwd():
        g = out.grad
        if g is None:
            return
        gm = g.reshape(n, k, ho * wo)
        weight._accum(np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape))
        if x.requires_grad:
            dcols = np.matmul(wm.T, gm)
            x._accum(_col2im(dcols, x.data.shape, kh, kw, stride, padding))

    return _record("conv2d", (x, weight), out, bwd)


def avg_pool2d(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Mean over k×k windows; the divisor counts only in-bounds cells."""
    if x.data.ndim != 4:
        raise DimensionError(f"avg_pool2d input must be 4-D NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if h < 1 or w < 1:
        raise DimensionError(f"avg_pool2d: empty spatial dims {h}x{w}")
    cols = _im2col(x.data, k, k, stride, padding)
    ones = np.ones((1, 1, h, w), dtype=x.data.dtype)
    counts = _im2col(ones, k, k, stride, padding).sum(axis=1)  # [1, L]
    ho = _out_dim(h, k, stride, padding)
    wo = _out_dim(w, k, stride, padding)
    s = cols.reshape(n, c, k * k, -1).sum(axis=2)
    out = Tensor((s / counts).reshape(n, c, ho, wo))

    def bwd():
        g = out.grad
        if g is None:
            return
        gm = (g.reshape(n, c, -1) / counts)[:, :, None, :]
        dcols = np.broadcast_to(gm, (n, c, k * k, gm.shape[-1])).reshape(n, c * k * k, -1)
        x._accum(_col2im(dcols, x.data.shape, k, k, stride, padding))

    return _record("avg_pool2d", (x,), out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool input must be 4-D, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd():
        g = out.grad
        if g is None:
            return
        x._accum(np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy())

    return _record("global_avg_pool", (x,), out, bwd)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N,H,W).

    In training mode the batch statistics are used and the running buffers
    are updated in place: running = momentum*running + (1-momentum)*batch.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d input must be 4-D, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(f"batchnorm2d: affine params must have shape ({c},)")
    m = n * h * w
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    def bwd():
        g = out.grad
        if g is None:
            return
        beta._accum(g.sum(axis=(0, 2, 3)))
        gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            sum_dxhat = dxhat.sum(axis=(0, 2, 3))
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
            dx = (inv_std[None, :, None, None] / m) * (
                m * dxhat
                - sum_dxhat[None, :, None, None]
                - xhat * sum_dxhat_xhat[None, :, None, None])
        else:
            dx = dxhat * inv_std[None, :, None, None]
        x._accum(dx)

    return _record("batchnorm2d", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits [N,K]) and integer labels."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be 2-D [N,K], got shape {logits.data.shape}")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValidationError(f"label {bad} outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    out = Tensor((lse - picked).mean())

    def bwd():
        g = out.grad
        if g is None:
            return
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        logits._accum(g * p / n)

    return _record("softmax_cross_entropy", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# Probability-weighted mixture (used by mixed edges)
# ---------------------------------------------------------------------------

def weighted_sum(p: Tensor, xs: Sequence[Optional[Tensor]]) -> Tensor:
    """sum_i p[i] * xs[i]; entries with xs[i] is None must have p[i] == 0.

    Skipped entries contribute nothing to the forward value and receive a
    zero gradient slot, which is exact whenever p comes from sparsemax
    (its Jacobian is zero outside the support).
    """
    if p.data.ndim != 1 or len(xs) != p.data.shape[0]:
        raise DimensionError(
            f"weighted_sum: p has shape {p.data.shape} but {len(xs)} terms given")
    acc = None
    for i, x in enumerate(xs):
        if x is None:
            if p.data[i] != 0.0:
                raise ContractError(f"weighted_sum: term {i} skipped but p[{i}] != 0")
            continue
        term = p.data[i] * x.data
        acc = term if acc is None else acc + term
    if acc is None:
        raise ContractError("weighted_sum: all terms skipped")
    out = Tensor(acc)

    def bwd():
        g = out.grad
        if g is None:
            return
        if p.requires_grad:
            dp = np.zeros_like(p.data)
            for i, x in enumerate(xs):
                if x is not None:
                    dp[i] = (g * x.data).sum()
            p._accum(dp)
        for i, x in enumerate(xs):
            if x is not None:
                x._accum(p.data[i] * g)

    inputs = [p] + [x for x in xs if x is not None]
    return _record("weighted_sum", inputs, out, bwd)
