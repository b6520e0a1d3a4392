"""Dense float tensors with a reverse-mode gradient tape.

Data lives in numpy arrays, float32 by default. A float64 "reference mode"
exists solely for finite-difference gradient checking; switch it on with the
``reference_mode`` context manager and build the model inside it so every
array shares the dtype.

Recording model: while a ``GradientTape`` is active (``with tape:``), every
op appends a node holding the op kind, the input handles and a backward
closure over the saved forward values. Tensors touched by a recorded op get
a ``tape_id`` handle; tensors created outside any tape have none.
``GradientTape.backward(loss)`` runs one reverse topological sweep,
accumulating (+=) into shared nodes, and deposits gradients on trainable
leaves and on tensors that called ``retain_grad()``. Non-trainable leaves
receive no grad.

Broadcasting in the elementwise ops follows numpy's right-aligned rule
(scalar, trailing-dimension and size-1 axes); the backward pass sums over
the broadcast axes.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, GeometryError, ShapeError, UsageError

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype)


class reference_mode:
    """Context manager switching new tensors to float64 for gradcheck."""

    def __enter__(self):
        self._prev = default_dtype()
        set_default_dtype(np.float64)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._prev)
        return False


def active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    """N-dimensional float array, optionally tracked by the active tape."""

    __slots__ = ("data", "grad", "trainable", "retains_grad", "tape", "tape_id")

    def __init__(self, data, trainable: bool = False):
        self.data = np.asarray(data, dtype=default_dtype())
        self.grad = None
        self.trainable = trainable
        self.retains_grad = False
        self.tape = None
        self.tape_id = None

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

    def retain_grad(self):
        """Ask backward() to keep this tensor's gradient even if interior."""
        self.retains_grad = True
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, trainable={self.trainable})"

    # operator sugar; all dispatch to the module-level ops
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

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


class _Node:
    __slots__ = ("op", "inputs", "backward", "tensor")

    def __init__(self, op, inputs, backward, tensor):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.tensor = tensor


class GradientTape:
    """Append-only op record; inputs of a node always precede it."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.active = False

    def __enter__(self):
        if active_tape() is not None:
            raise UsageError("a gradient tape is already active on this thread")
        _state.tape = self
        self.active = True
        return self

    def __exit__(self, *exc):
        _state.tape = None
        self.active = False
        return False

    def _handle(self, t: Tensor) -> int:
        if t.tape is self:
            return t.tape_id
        # first appearance on this tape: register as a leaf
        t.tape = self
        t.tape_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, t))
        return t.tape_id

    def record(self, op: str, inputs, out: Tensor, backward) -> None:
        ids = tuple(self._handle(t) for t in inputs)
        out.tape = self
        out.tape_id = len(self.nodes)
        self.nodes.append(_Node(op, ids, backward, out))

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from a scalar loss; deposits grads on trainable or
        grad-retaining tensors."""
        if loss.tape is not self or loss.tape_id is None:
            raise UsageError("backward() target was not recorded on this tape")
        if loss.size != 1:
            raise UsageError(f"loss must be scalar, got shape {tuple(loss.shape)}")
        grads: list = [None] * (loss.tape_id + 1)
        grads[loss.tape_id] = np.ones_like(loss.data)
        for i in range(loss.tape_id, -1, -1):
            g = grads[i]
            grads[i] = None
            if g is None:
                continue
            node = self.nodes[i]
            t = node.tensor
            if node.op == "leaf":
                if t.trainable or t.retains_grad:
                    t.grad = g if t.grad is None else t.grad + g
                continue
            if t.retains_grad:
                t.grad = g if t.grad is None else t.grad + g
            for j, ig in zip(node.inputs, node.backward(g)):
                if ig is None:
                    continue
                # never add in place: closures may return shared/viewed buffers
                grads[j] = ig if grads[j] is None else grads[j] + ig


def backward(loss: Tensor) -> None:
    """Run the reverse sweep on the tape that recorded `loss`."""
    if loss.tape is None:
        raise UsageError("backward() on a tensor that is not on any tape")
    loss.tape.backward(loss)


def _emit(op, inputs, out_data, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_broadcast(a_shape, b_shape, op):
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {tuple(a_shape)} and {tuple(b_shape)} "
                         "do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise suite

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "add")
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "sub")
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    return _emit("div", (a, b), ad / bd,
                 lambda g: (_unbroadcast(g / bd, a.shape),
                            _unbroadcast(-g * ad / (bd * bd), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("scale", (a,), a.data * s, lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("add_scalar", (a,), a.data + s, lambda g: (g,))


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    if p == 0.0:
        return _emit("pow_const", (a,), np.ones_like(ad),
                     lambda g: (np.zeros_like(ad),))
    return _emit("pow_const", (a,), ad ** p,
                 lambda g: (g * p * ad ** (p - 1.0),))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if not (ad > 0).all():
        raise DataError("log: input has non-positive entries; clamp first")
    return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("relu", (a,), np.maximum(ad, 0), lambda g: (g * (ad > 0),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", (a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where lo <= x <= hi."""
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return _emit("clip", (a,), np.clip(ad, lo, hi), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# structural ops

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape),
                 lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes),
                 lambda g: (np.transpose(g, inv),))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit("concat", tuple(tensors), out,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _emit("narrow", (a,), a.data[idx], bwd)


def take(a: Tensor, indices) -> Tensor:
    """Row gather along axis 0; gradient scatters with accumulation."""
    indices = np.asarray(indices, dtype=np.intp)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        return (full,)

    return _emit("take", (a,), a.data[indices], bwd)


def roll(a: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(int(s) for s in np.atleast_1d(shifts))
    axes = tuple(int(x) for x in np.atleast_1d(axes))
    neg_shifts = tuple(-s for s in shifts)
    return _emit("roll", (a,), np.roll(a.data, shifts, axes),
                 lambda g: (np.roll(g, neg_shifts, axes),))


# ---------------------------------------------------------------------------
# reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape),)

    return _emit("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape
    count = a.size if axis is None else np.prod([in_shape[x] for x in np.atleast_1d(axis)])

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, in_shape),)

    return _emit("mean", (a,), a.data.mean(axis=axis, keepdims=keepdims), bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got "
                         f"{tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree between "
                         f"{tuple(a.shape)} and {tuple(b.shape)}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", (a, b), np.matmul(ad, bd), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax", (a,), out, bwd)


def layer_norm(a: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then apply
    the optional per-feature affine."""
    if eps <= 0:
        raise DataError(f"layer_norm: eps must be positive, got {eps}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    inputs = [a]
    if gamma is not None:
        inputs.append(gamma)
    if beta is not None:
        inputs.append(beta)

    def bwd(g):
        gxhat = g * gamma.data if gamma is not None else g
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        grads = [gx]
        lead = tuple(range(x.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _emit("layer_norm", tuple(inputs), out, bwd)


# ---------------------------------------------------------------------------
# convolution and pooling

def _conv_geometry(size: int, k: int, stride: int, pad: int, name: str) -> int:
    out = (size + 2 * pad - k) // stride + 1
    if size + 2 * pad < k or out < 1:
        raise GeometryError(f"conv2d: kernel {k} does not fit padded input "
                            f"({name}={size}, pad={pad}); computed output {name}'={out}")
    return out


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation over [N,C,H,W] with weight [F,C/groups,kh,kw].

    groups == C gives the depthwise case. Output spatial size follows
    floor((size + 2*pad - k) / stride) + 1.
    """
    N, C, H, W = x.shape
    F, Cg, kh, kw = w.shape
    if C % groups or F % groups:
        raise ShapeError(f"conv2d: channels {C} / filters {F} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"conv2d: weight {tuple(w.shape)} inconsistent with input "
                         f"{tuple(x.shape)} at groups={groups}")
    Ho = _conv_geometry(H, kh, stride, padding, "H")
    Wo = _conv_geometry(W, kw, stride, padding, "W")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    wing = win.reshape(N, groups, Cg, Ho, Wo, kh, kw)
    wg = w.data.reshape(groups, F // groups, Cg, kh, kw)
    out = np.einsum("ngchwij,gfcij->ngfhw", wing, wg, optimize=True)
    out = np.ascontiguousarray(out.reshape(N, F, Ho, Wo))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bwd(g):
        gg = g.reshape(N, groups, F // groups, Ho, Wo)
        gw = np.einsum("ngchwij,ngfhw->gfcij", wing, gg, optimize=True)
        gw = gw.reshape(F, Cg, kh, kw)
        gwin = np.einsum("ngfhw,gfcij->ngchwij", gg, wg, optimize=True)
        gwin = gwin.reshape(N, C, Ho, Wo, kh, kw)
        gxp = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + Ho * stride:stride, j:j + Wo * stride:stride] += gwin[:, :, :, :, i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit("conv2d", inputs, out, bwd)


def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max pooling; gradient routes to the first (row-major) maximal index
    within each window."""
    stride = k if stride is None else stride
    N, C, H, W = x.shape
    Ho = _conv_geometry(H, k, stride, 0, "H")
    Wo = _conv_geometry(W, k, stride, 0, "W")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(N, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        n, c, ho, wo = np.indices((N, C, Ho, Wo), sparse=False)
        ih = ho * stride + arg // k
        iw = wo * stride + arg % k
        np.add.at(gx, (n, c, ih, iw), g)
        return (gx,)

    return _emit("max_pool2d", (x,), np.ascontiguousarray(out), bwd)


def adaptive_avg_pool2d(x: Tensor) -> Tensor:
    """Global average pooling to 1x1: equals the spatial mean per channel."""
    N, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / (H * W), x.shape),)

    return _emit("adaptive_avg_pool2d", (x,), out, bwd)
