"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Design notes:
  * Tensors hold contiguous row-major float64 data.  Ops never hand out views.
  * Ops record themselves on the innermost active Tape only when at least one
    input is gradient-tracked.  Forward-only evaluation (no tape) is free.
  * Tape entries are appended in execution order, so the list itself is a
    topological order; backward walks it once in reverse.
  * backward() accumulates into ``Tensor.grad`` without zeroing, so replaying
    the same tape twice yields exactly 2x gradients.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, NumericsError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Non-finite outputs raise immediately when enabled (see spec'd debug checks).
DEBUG_CHECKS = os.environ.get("CROSSVIEW_DEBUG", "") not in ("", "0")


def set_debug_checks(enabled: bool) -> None:
    global DEBUG_CHECKS
    DEBUG_CHECKS = bool(enabled)


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "grad_tracked")

    def __init__(self, data, grad_tracked: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad_tracked = bool(grad_tracked)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.grad_tracked:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.grad_tracked})"

    # Operator sugar; all graph building goes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Entry:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed ops, used to replay adjoints in reverse."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise ContractError("tape stack corrupted")
        return False

    def __len__(self):
        return len(self.entries)

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(tensor) into .grad of every tracked tensor.

        Visits each entry exactly once.  Accumulates (never resets) grads.
        """
        if loss.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self.entries):
            g_out = acc.pop(id(entry.output), None)
            if g_out is None:
                continue  # not on any path to the loss
            entry.output.accumulate_grad(g_out)
            holders.pop(id(entry.output), None)
            grads_in = entry.backward(g_out)
            for tensor, g in zip(entry.inputs, grads_in):
                if g is None or not tensor.grad_tracked:
                    continue
                key = id(tensor)
                if key in acc:
                    acc[key] = acc[key] + g
                else:
                    acc[key] = g
                    holders[key] = tensor
        # Whatever is left never appears as an entry output: these are leaves.
        for key, g in acc.items():
            holders[key].accumulate_grad(g)


def _record(op: str, inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    tracked = any(t.grad_tracked for t in inputs)
    out = Tensor(out_data, grad_tracked=tracked)
    if DEBUG_CHECKS and not np.all(np.isfinite(out.data)):
        raise NumericsError(f"non-finite output from op {op!r}")
    if tracked and _TAPE_STACK:
        _TAPE_STACK[-1].entries.append(_Entry(op, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * b_data, a.shape) if a.grad_tracked else None
        gb = _unbroadcast(g * a_data, b.shape) if b.grad_tracked else None
        return ga, gb

    return _record("mul", (a, b), out, backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _record("neg", (a,), -a.data, backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _record("exp", (a,), out, backward)


# ---------------------------------------------------------------------------
# linear algebra and layout
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes, numpy-style leading broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.grad_tracked:
            ga = _unbroadcast(np.matmul(g, b_data.swapaxes(-1, -2)), a.shape)
        if b.grad_tracked:
            gb = _unbroadcast(np.matmul(a_data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", (a, b), out, backward)


def rowwise_linear(x, w, b=None) -> Tensor:
    """x[n, d] @ w[d, f] (+ b[f]) with a per-row deterministic reduction.

    Unlike BLAS matmul, the einsum reduction for a given row does not depend
    on which other rows are present, so computing a row subset is bit-identical
    to slicing the full product.  The expert routing paths rely on this.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"rowwise_linear expects [n,d]@[d,f], got {x.shape}, {w.shape}")
    out = np.einsum("nd,df->nf", x.data, w.data)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs.append(b)
    x_data, w_data = x.data, w.data

    def backward(g):
        gx = np.einsum("nf,df->nd", g, w_data) if x.grad_tracked else None
        gw = np.einsum("nd,nf->df", x_data, g) if w.grad_tracked else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=0) if b.grad_tracked else None)
        return tuple(grads)

    return _record("rowwise_linear", tuple(inputs), out, backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _record("transpose", (a,), np.transpose(a.data, axes), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape

    def backward(g):
        return (g.reshape(in_shape),)

    return _record("reshape", (a,), a.data.reshape(shape), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tensors, out, backward)


def index_range(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    a = as_tensor(a)
    sel = [slice(None)] * a.ndim
    sel[axis] = slice(start, stop)
    sel = tuple(sel)
    in_shape = a.shape

    def backward(g):
        full = np.zeros(in_shape)
        full[sel] = g
        return (full,)

    return _record("index_range", (a,), a.data[sel], backward)


def select_last(a, index: int) -> Tensor:
    """a[..., index]; backward scatters into the selected slot."""
    a = as_tensor(a)
    in_shape = a.shape

    def backward(g):
        full = np.zeros(in_shape)
        full[..., index] = g
        return (full,)

    return _record("select_last", (a,), np.ascontiguousarray(a.data[..., index]), backward)


def gather_rows(a, idx) -> Tensor:
    """Select rows of a 2-d tensor by integer index."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d tensor, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    in_shape = a.shape

    def backward(g):
        full = np.zeros(in_shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("gather_rows", (a,), a.data[idx], backward)


def scatter_rows(a, idx, num_rows: int) -> Tensor:
    """Place the rows of ``a`` at positions ``idx`` of a zero [num_rows, d] tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"scatter_rows expects a 2-d tensor, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((num_rows, a.shape[1]))
    out[idx] = a.data

    def backward(g):
        return (g[idx],)

    return _record("scatter_rows", (a,), out, backward)


def tile_leading(a, n: int) -> Tensor:
    """Repeat a tensor along a new leading axis; backward sums it away."""
    a = as_tensor(a)
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()

    def backward(g):
        return (g.sum(axis=0),)

    return _record("tile_leading", (a,), out, backward)


def diag_part(a) -> Tensor:
    """Diagonal of a square matrix."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diag_part expects a square matrix, got {a.shape}")
    n = a.shape[0]

    def backward(g):
        full = np.zeros((n, n))
        np.fill_diagonal(full, g)
        return (full,)

    return _record("diag_part", (a,), np.ascontiguousarray(np.diagonal(a.data)), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(in_shape, g.reshape(-1)[0]),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, in_shape).copy(),)

    return _record("sum", (a,), out, backward)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    count = a.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(in_shape, g.reshape(-1)[0] / count),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / count, in_shape).copy(),)

    return _record("mean", (a,), out, backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalizers
# ---------------------------------------------------------------------------

def gelu(a) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _record("gelu", (a,), out, backward)


def softmax(a) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericsError("softmax requires finite inputs")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (a,), out, backward)


def logsumexp(a) -> Tensor:
    """log(sum(exp(x))) over the last axis, max-shifted for stability."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericsError("logsumexp requires finite inputs")
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    probs = e / s

    def backward(g):
        return (np.expand_dims(g, -1) * probs,)

    return _record("logsumexp", (a,), out, backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gain.data + bias.data
    gain_data = gain.data

    def backward(g):
        ga = gg = gb = None
        if gain.grad_tracked:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.grad_tracked:
            gb = _unbroadcast(g, bias.shape)
        if a.grad_tracked:
            dxhat = g * gain_data
            term1 = dxhat.mean(axis=-1, keepdims=True)
            term2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            ga = inv_std * (dxhat - term1 - xhat * term2)
        return ga, gg, gb

    return _record("layer_norm", (a, gain, bias), out, backward)


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Scale the last axis to unit L2 norm (norm clamped below by eps)."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = a.data / norm

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / norm,)

    return _record("l2_normalize", (a,), out, backward)


# ---------------------------------------------------------------------------
# spatial ops (NCHW, stride 1, same padding)
# ---------------------------------------------------------------------------

def _check_nchw(x, op):
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a [B,C,H,W] tensor, got {x.shape}")


def pointwise_conv2d(x, w, b=None) -> Tensor:
    """1x1 convolution: channel remix at every spatial position."""
    x, w = as_tensor(x), as_tensor(w)
    _check_nchw(x, "pointwise_conv2d")
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"pointwise kernel must be [C_out, C_in={x.shape[1]}], got {w.shape}"
        )
    out = np.moveaxis(np.tensordot(w.data, x.data, axes=([1], [1])), 0, 1)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        inputs.append(b)
    x_data, w_data = x.data, w.data

    def backward(g):
        gx = gw = None
        if x.grad_tracked:
            gx = np.moveaxis(np.tensordot(w_data.T, g, axes=([1], [1])), 0, 1)
        if w.grad_tracked:
            gw = np.tensordot(g, x_data, axes=([0, 2, 3], [0, 2, 3]))
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.grad_tracked else None)
        return tuple(grads)

    return _record("pointwise_conv2d", tuple(inputs), out, backward)


def depthwise_conv2d(x, k, b=None) -> Tensor:
    """Per-channel kxk convolution with same padding, stride 1, odd k only."""
    x, k = as_tensor(x), as_tensor(k)
    _check_nchw(x, "depthwise_conv2d")
    if k.ndim != 3 or k.shape[0] != x.shape[1] or k.shape[1] != k.shape[2]:
        raise ShapeError(
            f"depthwise kernel must be [C={x.shape[1]}, k, k], got {k.shape}"
        )
    ksize = k.shape[1]
    if ksize % 2 == 0:
        raise ConfigError(f"same-padding needs an odd kernel size, got {ksize}")
    pad = ksize // 2
    _, _, h, w_ext = x.shape
    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros_like(x.data)
    for dy in range(ksize):
        for dx in range(ksize):
            out += k.data[None, :, dy, dx, None, None] * xpad[:, :, dy:dy + h, dx:dx + w_ext]
    inputs = [x, k]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        inputs.append(b)
    k_data = k.data

    def backward(g):
        gx = gk = None
        if x.grad_tracked:
            gxp = np.zeros_like(xpad)
            for dy in range(ksize):
                for dx in range(ksize):
                    gxp[:, :, dy:dy + h, dx:dx + w_ext] += (
                        k_data[None, :, dy, dx, None, None] * g
                    )
            gx = gxp[:, :, pad:pad + h, pad:pad + w_ext]
        if k.grad_tracked:
            gk = np.zeros_like(k_data)
            for dy in range(ksize):
                for dx in range(ksize):
                    gk[:, dy, dx] = (g * xpad[:, :, dy:dy + h, dx:dx + w_ext]).sum(
                        axis=(0, 2, 3)
                    )
        grads = [gx, gk]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.grad_tracked else None)
        return tuple(grads)

    return _record("depthwise_conv2d", tuple(inputs), out, backward)


def conv2d(x, kernel, mode: str, bias=None, pointwise_kernel=None,
           pointwise_bias=None) -> Tensor:
    """Dispatch over the three convolution flavours used by the model.

    mode="pointwise_1x1":            kernel [C_out, C_in]
    mode="depthwise_kxk":            kernel [C, k, k]
    mode="depthwise_separable_kxk":  kernel [C, k, k] then pointwise_kernel
    """
    if mode == "pointwise_1x1":
        return pointwise_conv2d(x, kernel, bias)
    if mode == "depthwise_kxk":
        return depthwise_conv2d(x, kernel, bias)
    if mode == "depthwise_separable_kxk":
        mid = depthwise_conv2d(x, kernel, bias)
        if pointwise_kernel is None:
            raise ConfigError("depthwise_separable mode needs a pointwise kernel")
        return pointwise_conv2d(mid, pointwise_kernel, pointwise_bias)
    raise ConfigError(f"unknown conv2d mode {mode!r}")


def maxpool2d(x, ksize: int = 3) -> Tensor:
    """kxk max pooling, stride 1, same padding.

    Backward routes each cell's gradient to the first maximum of its window
    in row-major window scan order, which makes backward deterministic.
    """
    x = as_tensor(x)
    _check_nchw(x, "maxpool2d")
    if ksize % 2 == 0:
        raise ConfigError(f"same-padding needs an odd window, got {ksize}")
    pad = ksize // 2
    _, _, h, w_ext = x.shape
    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                  constant_values=-np.inf)
    windows = np.stack(
        [xpad[:, :, dy:dy + h, dx:dx + w_ext]
         for dy in range(ksize) for dx in range(ksize)],
        axis=0,
    )
    argmax = windows.argmax(axis=0)  # first max wins: row-major window order
    out = np.take_along_axis(windows, argmax[None], axis=0)[0]
    in_shape = x.shape

    def backward(g):
        gxp = np.zeros((in_shape[0], in_shape[1], h + 2 * pad, w_ext + 2 * pad))
        for j in range(ksize * ksize):
            dy, dx = divmod(j, ksize)
            mask = argmax == j
            if mask.any():
                gxp[:, :, dy:dy + h, dx:dx + w_ext] += g * mask
        return (gxp[:, :, pad:pad + h, pad:pad + w_ext],)

    return _record("maxpool2d", (x,), out, backward)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode, mask-and-rescale in training."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x  # bit-identical passthrough
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng stream")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        return (g * mask,)

    return _record("dropout", (x,), x.data * mask, backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradcheck(fn, point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor and must be deterministic.  The
    relative error denominator is max(|analytic|, |fd|, 1e-8) per coordinate.
    """
    probe = Tensor(point.data.copy(), grad_tracked=True)
    with Tape() as tape:
        loss = fn(probe)
    tape.backward(loss)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = probe.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn(Tensor(probe.data)).item()
        flat[i] = orig - step
        f_minus = fn(Tensor(probe.data)).item()
        flat[i] = orig
        fd[i] = (f_plus - f_minus) / (2.0 * step)
    fd = fd.reshape(probe.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    return float((np.abs(analytic - fd) / denom).max())


def gradcheck_params(loss_fn, params: dict[str, Tensor], step: float = 1e-5) -> dict[str, float]:
    """Gradcheck a no-arg loss closure against each named parameter tensor.

    Analytic gradients come from one taped backward pass; finite differences
    perturb each parameter in place and re-run the (tape-free) forward.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    errs = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_fn().item()
            flat[i] = orig - step
            f_minus = loss_fn().item()
            flat[i] = orig
            fd[i] = (f_plus - f_minus) / (2.0 * step)
        fd = fd.reshape(p.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
        errs[name] = float((np.abs(analytic - fd) / denom).max())
    return errs
