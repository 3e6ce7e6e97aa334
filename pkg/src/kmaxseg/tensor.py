"""Dense float64 tensors with reverse-mode automatic differentiation.

Every array in this package is a ``Tensor``: a numpy float64 buffer plus an
optional gradient buffer and a link to the operation that produced it.
Calling ``backward()`` on a scalar output replays the recorded operations in
reverse topological order (each node exactly once), accumulating gradients
into every reachable tensor that requires them.

Only the operations this package needs are provided; there is no general
broadcasting beyond what those operations use, no views of views bookkeeping,
and no control-flow capture. Everything is float64 so finite-difference
checks stay meaningful.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import AxisError, ContractError, ShapeError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables gradient recording inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """A new tensor sharing this data but cut off from the graph."""
        return Tensor(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    # -- backward ------------------------------------------------------------

    def backward(self):
        """Reverse-mode pass from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
            )
        tape = GradTape.from_output(self)
        self.grad = np.ones_like(self.data)
        tape.backprop()


class GradTape:
    """Topologically ordered record of the ops reachable from one output.

    Parents always precede children in ``nodes``; backprop walks the list
    once in reverse, so every recorded operation's backward closure fires
    exactly once.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @staticmethod
    def from_output(out):
        nodes = []
        seen = set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return GradTape(nodes)

    def backprop(self):
        for t in reversed(self.nodes):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(data, parents, backward):
    """Wrap an op result, recording the backward closure when needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_axis(x, axis):
    if not -x.data.ndim <= axis < x.data.ndim:
        raise AxisError(f"axis {axis} out of range for shape {x.data.shape}")
    return axis % x.data.ndim


# -- arithmetic ---------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bwd)


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)

    def bwd(g):
        _accum(x, g * c)

    return _make(x.data * c, (x,), bwd)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(data, (a, b), bwd)


def log(x):
    x = _as_tensor(x)

    def bwd(g):
        _accum(x, g / x.data)

    return _make(np.log(x.data), (x,), bwd)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0

    def bwd(g):
        _accum(x, g * mask)

    return _make(x.data * mask, (x,), bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact (erf-based) gaussian error linear unit."""
    from scipy.special import erf

    x = _as_tensor(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accum(x, g * (phi + x.data * pdf))

    return _make(x.data * phi, (x,), bwd)


# -- shape ops ----------------------------------------------------------------


def transpose(x):
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {x.data.shape}")

    def bwd(g):
        _accum(x, g.T)

    return _make(x.data.T, (x,), bwd)


def reshape(x, shape):
    x = _as_tensor(x)
    orig = x.data.shape

    def bwd(g):
        _accum(x, g.reshape(orig))

    return _make(x.data.reshape(shape), (x,), bwd)


def flatten(x):
    return reshape(x, (-1,))


def slice_along(x, axis, start, stop):
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    index = (slice(None),) * axis + (slice(start, stop),)

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[index] = g
            _accum(x, gx)

    return _make(x.data[index], (x,), bwd)


def take(x, indices, axis=0):
    """Select rows (or slices along ``axis``) by integer index."""
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    idx = np.asarray(indices, dtype=np.intp)

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (slice(None),) * axis + (idx,), g)
            _accum(x, gx)

    return _make(np.take(x.data, idx, axis=axis), (x,), bwd)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = _check_axis(tensors[0], axis)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(data, tuple(tensors), bwd)


# -- reductions ---------------------------------------------------------------


def reduce_sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is not None:
        axis = _check_axis(x, axis)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(data, (x,), bwd)


def reduce_mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is not None:
        axis = _check_axis(x, axis)
    n = x.data.size if axis is None else x.data.shape[axis]
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape) / n)

    return _make(data, (x,), bwd)


# -- normalization / attention primitives --------------------------------------


def softmax(x, axis):
    """Stabilized softmax along ``axis``; slices sum to one."""
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        _accum(x, s * (g - inner))

    return _make(s, (x,), bwd)


def argmax_onehot(x):
    """Hard one-hot assignment of each column to its best row.

    Input is an affinity matrix of shape (clusters, pixels); the result has a
    single 1 per pixel column, at the row with the largest affinity (ties go
    to the lowest row index). The output is detached: the assignment carries
    no gradient.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.data.size == 0:
        raise ShapeError(
            f"argmax_onehot expects a nonempty 2-D affinity matrix, got {x.data.shape}"
        )
    n, hw = x.data.shape
    best = x.data.argmax(axis=0)
    out = np.zeros((n, hw))
    out[best, np.arange(hw)] = 1.0
    return Tensor(out)


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row layer normalization with learnable gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.shape[-1] != gain.data.shape[-1]:
        raise ShapeError(
            f"layer_norm gain {gain.data.shape} does not match rows of {x.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))

    return _make(data, (x, gain, bias), bwd)


# -- spatial ops ----------------------------------------------------------------


def upsample2x_nearest(x):
    """Nearest-neighbor 2x upsampling of an (H, W, C) tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"upsample2x_nearest expects (H, W, C), got {x.data.shape}")
    h, w, c = x.data.shape
    data = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)

    def bwd(g):
        _accum(x, g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)))

    return _make(data, (x,), bwd)


def conv3x3(x, weight, bias=None, stride=1):
    """3x3 convolution over an (H, W, Cin) tensor, padding 1, stride 1 or 2.

    ``weight`` has shape (3, 3, Cin, Cout); ``bias`` is (Cout,) or None.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if bias is not None:
        bias = _as_tensor(bias)
    if x.data.ndim != 3 or weight.data.ndim != 4 or weight.data.shape[:2] != (3, 3):
        raise ShapeError(
            f"conv3x3 expects (H,W,Cin) and (3,3,Cin,Cout), got {x.data.shape} "
            f"and {weight.data.shape}"
        )
    if x.data.shape[2] != weight.data.shape[2]:
        raise ShapeError(
            f"conv3x3 channel mismatch: input {x.data.shape} vs kernel {weight.data.shape}"
        )
    if stride not in (1, 2):
        raise ValueError(f"conv3x3 stride must be 1 or 2, got {stride}")

    h, w, cin = x.data.shape
    cout = weight.data.shape[3]
    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))
    win = win[::stride, ::stride]  # (Ho, Wo, Cin, 3, 3)
    ho, wo = win.shape[:2]
    data = np.einsum("hwcij,ijco->hwo", win, weight.data, optimize=True)
    if bias is not None:
        data = data + bias.data

    def bwd(g):
        if weight.requires_grad:
            _accum(weight, np.einsum("hwcij,hwo->ijco", win, g, optimize=True))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 1)))
        if x.requires_grad:
            gx = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    contrib = g @ weight.data[i, j].T  # (Ho, Wo, Cin)
                    gx[i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
            _accum(x, gx[1 : 1 + h, 1 : 1 + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, parents, bwd)


# -- losses ---------------------------------------------------------------------


def cross_entropy_from_logits(logits, targets, reduction="mean"):
    """Row-wise negative log-likelihood of integer ``targets`` under ``logits``.

    ``reduction`` is 'mean', 'sum', or 'none' (per-row vector).
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (rows, classes), got {logits.data.shape}")
    ids = np.asarray(targets, dtype=np.intp)
    r, c = logits.data.shape
    if ids.shape != (r,):
        raise ShapeError(f"targets shape {ids.shape} does not match {r} rows")
    if ids.size and (ids.min() < 0 or ids.max() >= c):
        raise ValueError(f"target ids must lie in [0, {c})")

    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    rows = np.arange(r)
    nll = (m[:, 0] + np.log(z[:, 0])) - logits.data[rows, ids]

    if reduction == "none":
        data = nll
    elif reduction == "sum":
        data = nll.sum()
    elif reduction == "mean":
        data = nll.mean()
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bwd(g):
        d = p.copy()
        d[rows, ids] -= 1.0
        if reduction == "none":
            d *= g[:, None]
        elif reduction == "sum":
            d *= g
        else:
            d *= g / r
        _accum(logits, d)

    return _make(data, (logits,), bwd)
