"""Reverse-mode automatic differentiation over dense numpy tensors.

A ``Tensor`` wraps a contiguous numpy array. While a ``Tape`` is active,
every differentiable operation appends a node (inputs, output, backward
rule) in execution order, so the tape is topologically sorted by
construction. ``backward`` replays the tape once in reverse, summing
gradients of multi-consumer tensors.

Training runs in float32; gradient checking uses float64 tensors with the
same code path. Tapes are confined to the thread that created them;
tape-free forward passes (``no_grad`` or no active tape) are pure numpy
and safe to run concurrently over shared frozen parameters.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

_ids = itertools.count()
_state = threading.local()


class DivergenceError(RuntimeError):
    """Raised when a forward value or loss stops being finite."""


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling tape recording for its body."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """Dense n-d array of reals, optionally participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "tid")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray):
            arr = np.ascontiguousarray(data)
        else:
            arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if any(e < 1 for e in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar over the primitive ops below
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_const(self, other)

    def __rmul__(self, other):
        return mul_const(self, other)

    def __neg__(self):
        return mul_const(self, -1.0)


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; use as a context manager."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False


def _record(op, inputs, out_data, backward_fn):
    """Create the op output and append a tape node when grad is live.

    ``backward_fn(g)`` returns one gradient array per input (None for
    inputs that need none).
    """
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        stack = _tape_stack()
        if stack:
            stack[-1].nodes.append(TapeNode(op, tuple(inputs), out, backward_fn))
    return out


def backward(tape, loss):
    """Accumulate d(loss)/d(t) for every requires_grad tensor on the tape.

    Returns a map from tensor id to gradient array and assigns ``.grad``
    on the tensors themselves. Gradients of tensors consumed by several
    ops are summed.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    produced = {node.output.tid for node in tape.nodes}
    if loss.tid not in produced:
        raise ValueError("loss was not produced by ops recorded on this tape")
    if not np.isfinite(loss.data).all():
        raise DivergenceError("loss is not finite")

    grads = {loss.tid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output.tid)
        if g is None:
            continue
        contribs = node.backward_fn(g)
        for t, c in zip(node.inputs, contribs):
            if c is None or not t.requires_grad:
                continue
            acc = grads.get(t.tid)
            grads[t.tid] = c if acc is None else acc + c
        node.output.grad = g

    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad:
                t.grad = grads.get(t.tid)
    return grads


# ---------------------------------------------------------------------------
# elementwise primitives

def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a, b):
    _same_shape(a, b, "add")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    _same_shape(a, b, "sub")
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b):
    _same_shape(a, b, "mul")
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (g * b.data if a.requires_grad else None,
                              g * a.data if b.requires_grad else None))


def add_const(a, c):
    return _record("add_const", (a,), a.data + a.data.dtype.type(c), lambda g: (g,))


def mul_const(a, c):
    c = a.data.dtype.type(c)
    return _record("mul_const", (a,), a.data * c, lambda g: (g * c,))


def relu(a):
    out = np.maximum(a.data, 0)
    return _record("relu", (a,), out, lambda g: (g * (a.data > 0),))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def exp(a):
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a):
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g: (g * (0.5 / out),))


def clamp_min(a, c):
    c = a.data.dtype.type(c)
    out = np.maximum(a.data, c)
    return _record("clamp_min", (a,), out, lambda g: (g * (a.data > c),))


def pow_const(a, c):
    """a ** c for a constant exponent; a must stay positive for non-integer c."""
    out = np.power(a.data, a.data.dtype.type(c))
    return _record("pow_const", (a,), out,
                   lambda g: (g * c * np.power(a.data, a.data.dtype.type(c - 1)),))


def pow_tensor(a, p):
    """a ** p with a scalar tensor exponent; requires a > 0 (log in backward)."""
    if p.data.size != 1:
        raise ValueError("pow_tensor: exponent must be scalar")
    pv = p.data.reshape(()).astype(a.data.dtype)
    out = np.power(a.data, pv)

    def bwd(g):
        ga = g * pv * np.power(a.data, pv - 1) if a.requires_grad else None
        gp = None
        if p.requires_grad:
            gp = np.asarray(np.sum(g * out * np.log(a.data)),
                            dtype=p.data.dtype).reshape(p.data.shape)
        return (ga, gp)

    return _record("pow_tensor", (a, p), out, bwd)


def mul_scalar_tensor(a, s):
    """Broadcast-multiply by a scalar tensor (e.g. a learnable exponent)."""
    if s.data.size != 1:
        raise ValueError("mul_scalar_tensor: second argument must be scalar")
    sv = s.data.reshape(())

    def bwd(g):
        ga = g * sv if a.requires_grad else None
        gs = None
        if s.requires_grad:
            gs = np.asarray(np.sum(g * a.data), dtype=s.data.dtype).reshape(s.data.shape)
        return (ga, gs)

    return _record("mul_scalar_tensor", (a, s), a.data * sv, bwd)


# ---------------------------------------------------------------------------
# reductions and reshuffles

def sum_all(a):
    out = np.asarray(np.sum(a.data, dtype=a.data.dtype))
    return _record("sum_all", (a,), out, lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def mean_all(a):
    n = a.data.dtype.type(a.data.size)
    out = np.asarray(np.sum(a.data, dtype=a.data.dtype) / n)
    return _record("mean_all", (a,), out,
                   lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def rowsum(a):
    """Sum a (N, D) tensor over D, yielding (N,)."""
    if a.data.ndim != 2:
        raise ValueError(f"rowsum expects a 2-d tensor, got {a.data.shape}")
    out = a.data.sum(axis=1)
    return _record("rowsum", (a,), out,
                   lambda g: (np.repeat(g[:, None], a.data.shape[1], axis=1),))


def mean_spatial(a):
    """Mean of an NCHW tensor over (H, W), yielding (N, C)."""
    if a.data.ndim != 4:
        raise ValueError(f"mean_spatial expects NCHW, got {a.data.shape}")
    n, c, h, w = a.data.shape
    scale = a.data.dtype.type(1.0 / (h * w))
    out = a.data.mean(axis=(2, 3), dtype=a.data.dtype)
    return _record("mean_spatial", (a,), out,
                   lambda g: (np.broadcast_to((g * scale)[:, :, None, None], a.data.shape).copy(),))


def mul_channels(x, gate):
    """Scale an NCHW tensor per (sample, channel) by an (N, C) gate."""
    if x.data.ndim != 4 or gate.data.shape != x.data.shape[:2]:
        raise ValueError(f"mul_channels: incompatible shapes {x.data.shape} and {gate.data.shape}")
    out = x.data * gate.data[:, :, None, None]

    def bwd(g):
        gx = g * gate.data[:, :, None, None] if x.requires_grad else None
        gg = np.sum(g * x.data, axis=(2, 3)) if gate.requires_grad else None
        return (gx, gg)

    return _record("mul_channels", (x, gate), out, bwd)


def concat_channels(a, b):
    """Concatenate two NCHW tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects NCHW tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.data.shape} and {b.data.shape}")
    ca = a.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _record("concat_channels", (a, b), out,
                   lambda g: (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:])))


def index_rows(a, idx):
    """Gather rows of a (N, D) tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record("index_rows", (a,), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking

def gradcheck(forward, x, epsilon=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``forward`` must map the tensor ``x`` to a scalar tensor. The relative
    error of a component is |analytic - numeric| / max(1, |analytic| + |numeric|).
    Use float64 tensors for trustworthy results.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    was_grad = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            y = forward(x)
        if y.data.size != 1:
            raise ValueError("forward must produce a scalar")
        if not np.isfinite(y.data).all():
            raise DivergenceError("forward produced a non-finite value")
        backward(tape, y)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad = was_grad
        x.grad = None

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = forward(x).item()
            flat[i] = orig - epsilon
            fm = forward(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise DivergenceError("forward produced a non-finite value during differencing")
            numeric[i] = (fp - fm) / (2.0 * epsilon)
    numeric = numeric.reshape(x.data.shape)

    denom = np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
