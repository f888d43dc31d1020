"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op appends one node to the active :class:`Tape`.
``backward`` walks the tape once in reverse, so there is no per-call
topological sort and gradient order is fully deterministic.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class GradientError(RuntimeError):
    """Misuse of the differentiation contract (non-scalar loss, stale tape...)."""


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple
    backward: Callable
    out: "Tensor"


@dataclass
class Tape:
    """Append-only op record; inputs of a node always precede it."""

    nodes: list = field(default_factory=list)

    def record(self, op, inputs, out, backward):
        node = Node(len(self.nodes), op, tuple(inputs), backward, out)
        self.nodes.append(node)
        out._node = node
        return node

    def clear(self):
        for node in self.nodes:
            node.out._node = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def fresh_tape():
    prev = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = prev


class Tensor:
    """A float array with an optional gradient slot.

    Leaves (inputs, parameters) have no node; op results carry the tape node
    that produced them. ``grad`` is only ever allocated for leaves with
    ``requires_grad``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def node_id(self):
        return None if self._node is None else self._node.id

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self, tuple(range(self.ndim))[::-1])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def backward(self, retain_tape: bool = False):
        backward(self, retain_tape=retain_tape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts):
    return _state.enabled and any(isinstance(t, Tensor) and t.requires_grad for t in ts)


def _make(op, data, inputs, backward_fn):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _needs_grad(*inputs):
        out.requires_grad = True
        _state.tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, retain_tape: bool = False):
    """Accumulate d(loss)/d(leaf) into every leaf that requires grad."""
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    node = loss._node
    if node is None:
        if not retain_tape:
            tape.clear()
        return
    if node.id >= len(tape.nodes) or tape.nodes[node.id] is not node:
        raise GradientError("loss was not recorded on the active tape")

    grads = {node.id: np.ones_like(loss.data)}
    for i in range(node.id, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        n = tape.nodes[i]
        in_grads = n.backward(g)
        for t, gi in zip(n.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if t._node is not None:
                j = t._node.id
                grads[j] = gi if j not in grads else grads[j] + gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=t.data.dtype, copy=True)
            else:
                t.grad += gi
    if not retain_tape:
        tape.clear()


# ---------------------------------------------------------------------------
# elementwise


def _bias_like(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0 or b.size == 1 and b.ndim <= 1:
        return "scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "bias"
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g, kind, shape):
    if kind == "same":
        return g
    if kind == "scalar":
        return np.asarray(g.sum()).reshape(shape)
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _bias_like(a.data, b.data)
    shape_b = b.shape

    def bw(g):
        return g, _reduce_to(g, kind, shape_b)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _bias_like(a.data, b.data)
    shape_b = b.shape

    def bw(g):
        return g, -_reduce_to(g, kind, shape_b)

    return _make("sub", a.data - b.data, (a, b), bw)


def neg(a) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar or a constant array."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        if c.shape not in ((), a.shape):
            raise ShapeError(f"cannot multiply shapes {a.shape} and {c.shape}")
        return _make("mul_const", a.data * c, (a,), lambda g: (g * c,))
    kind = _bias_like(a.data, b.data)
    ad, bd, shape_b = a.data, b.data, b.shape

    def bw(g):
        return g * bd, _reduce_to(g * ad, kind, shape_b)

    return _make("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"div needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return g / bd, -g * out / bd

    return _make("div", out, (a, b), bw)


def exp(a) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return _make("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make("gelu", out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions / normalisation


def sum_(a, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / float(n))


def _check_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")


def softmax(a, axis: int = -1) -> Tensor:
    _check_axis(a.data, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    _check_axis(a.data, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = xd.shape[-1]

    def bw(g):
        gg = g * gamma.data
        gx = inv / d * (d * gg - gg.sum(-1, keepdims=True) - xhat * (gg * xhat).sum(-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(0), flat.sum(0)

    return _make("layer_norm", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make("matmul", ad @ bd, (a, b), bw)


def reshape(a, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {shape}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in ts]}") from exc

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, tuple(ts), bw)


def take(a, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (full,)

    return _make("take", np.take(a.data, idx, axis=axis), (a,), bw)


# ---------------------------------------------------------------------------
# 3D convolution (channel-first, single sample)


def _im2col(x, k):
    # (C, Z, Y, X) -> (Z*Y*X', C*k^3) over valid windows
    win = sliding_window_view(x, (k, k, k), axis=(1, 2, 3))
    c, z, y, w = win.shape[:4]
    return win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(z * y * w, c * k**3), (z, y, w)


def conv3d(x, w, b, padding: int = 0) -> Tensor:
    """Stride-1 cubic-kernel convolution of a (C, Z, Y, X) volume."""
    if x.ndim != 4 or w.ndim != 5 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv3d shape mismatch: input {x.shape}, weight {w.shape}")
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    xp = np.pad(x.data, ((0, 0),) + ((padding, padding),) * 3) if padding else x.data
    cols, (oz, oy, ox) = _im2col(xp, k)
    wm = w.data.reshape(cout, -1)
    out = (cols @ wm.T + b.data).T.reshape(cout, oz, oy, ox)

    def bw(g):
        gm = g.reshape(cout, -1)
        gw = (gm @ cols).reshape(w.shape)
        gb = gm.sum(axis=1)
        gcols = (wm.T @ gm).reshape(cin, k, k, k, oz, oy, ox)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    gxp[:, i:i + oz, j:j + oy, l:l + ox] += gcols[:, i, j, l]
        if padding:
            gxp = gxp[:, padding:-padding, padding:-padding, padding:-padding]
        return gxp, gw, gb

    return _make("conv3d", np.ascontiguousarray(out), (x, w, b), bw)


def conv_transpose3d_2x(x, w, b) -> Tensor:
    """Kernel-2, stride-2 transposed convolution; doubles each spatial side.

    ``w`` has shape (C_in, C_out, 2, 2, 2).
    """
    if x.ndim != 4 or w.ndim != 5 or w.shape[0] != x.shape[0] or w.shape[2:] != (2, 2, 2):
        raise ShapeError(f"conv_transpose3d shape mismatch: input {x.shape}, weight {w.shape}")
    cin, z, y, xx = x.shape
    cout = w.shape[1]
    xm = x.data.reshape(cin, -1)
    wm = w.data.reshape(cin, cout * 8)
    y8 = (wm.T @ xm).reshape(cout, 2, 2, 2, z, y, xx)
    out = y8.transpose(0, 4, 1, 5, 2, 6, 3).reshape(cout, 2 * z, 2 * y, 2 * xx)
    out = out + b.data[:, None, None, None]

    def bw(g):
        g8 = g.reshape(cout, z, 2, y, 2, xx, 2).transpose(0, 2, 4, 6, 1, 3, 5).reshape(cout * 8, -1)
        gx = (wm @ g8).reshape(x.shape)
        gw = (xm @ g8.T).reshape(w.shape)
        gb = g.reshape(cout, -1).sum(axis=1)
        return gx, gw, gb

    return _make("conv_transpose3d", np.ascontiguousarray(out), (x, w, b), bw)


# ---------------------------------------------------------------------------
# numerical gradient check


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: tuple | None
    ok_finite: bool = True
    message: str = ""


def grad_check(f: Callable[[], Tensor], x: Tensor, eps=1e-6, *,
               dtype=np.float64, n_coords: int | None = None, rng=None) -> GradCheckResult:
    """Compare backward() against central differences for the leaf ``x``.

    ``f`` takes no arguments and must read ``x`` (typically a closure over a
    model or over ``x`` itself). The check runs with ``x`` promoted to
    ``dtype`` so that finite-difference noise does not swamp the comparison;
    ``x`` is restored afterwards. Returns the maximum over coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    ``eps`` may be a sequence of step sizes; each coordinate then scores the
    best of them. Large steps straddle leaky-ReLU kinks while small ones drown
    tiny gradients in rounding noise, and no single step suits a deep model.
    """
    steps = tuple(np.atleast_1d(np.asarray(eps, dtype=float)))
    if not steps or min(steps) <= 0:
        raise ValueError("eps must be positive")
    original, orig_flag, orig_grad = x.data, x.requires_grad, x.grad
    x.data = original.astype(dtype)
    x.requires_grad = True
    x.grad = None
    try:
        with fresh_tape():
            loss = f()
            if loss.data.size != 1:
                raise GradientError("grad_check needs a scalar-valued function")
            backward(loss)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        if n_coords is None or n_coords >= flat.size:
            coords = np.arange(flat.size)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=n_coords, replace=False))
        worst, worst_idx = 0.0, None
        with no_grad():
            for c in coords:
                old = flat[c]
                ana = float(analytic.reshape(-1)[c])
                err = np.inf
                for h in steps:
                    try:
                        flat[c] = old + h
                        fp = f().item()
                        flat[c] = old - h
                        fm = f().item()
                    except FloatingPointError as exc:
                        idx = tuple(int(i) for i in np.unravel_index(c, x.shape))
                        return GradCheckResult(np.inf, idx, False, f"non-finite at {idx}: {exc}")
                    finally:
                        flat[c] = old
                    num = (fp - fm) / (2 * h)
                    err = min(err, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
                if err > worst or worst_idx is None:
                    worst, worst_idx = max(err, worst), np.unravel_index(c, x.shape)
        return GradCheckResult(worst, tuple(int(i) for i in worst_idx))
    finally:
        x.data, x.requires_grad, x.grad = original, orig_flag, orig_grad
