"""Differentiable n-dimensional array core.

A small reverse-mode engine on top of dense row-major numpy arrays. It
implements exactly the kernels the transformer model needs (matmul, a few
elementwise maps, reductions, layer norm, softmax, row gather) plus a tape
that records operations and replays them backwards.

Broadcasting is deliberately restricted: binary elementwise ops accept equal
shapes, a scalar operand, or a smaller right operand whose shape matches the
trailing axes of the left one (broadcast over leading batch axes). Anything
else raises ShapeError.

Default precision is float32. Gradient checking runs under float64 via
`precision("float64")`.
"""

from __future__ import annotations

import builtins
import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class DomainError(ValueError):
    """Input outside an op's numeric domain (debug mode only)."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_debug = False


def default_dtype():
    return _default_dtype


def set_default_dtype(name):
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the default dtype ('float32' or 'float64')."""
    global _default_dtype
    saved = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = saved


def set_debug(flag):
    """Enable NaN/Inf and domain assertions on every op."""
    global _debug
    _debug = bool(flag)


class Tensor:
    """Dense row-major array with an optional gradient buffer.

    Value-semantic: construction copies, ops never mutate their inputs.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        if _debug and not np.isfinite(arr).all():
            raise DomainError("tensor holds non-finite values")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


@dataclass
class _Node:
    out_id: int
    inputs: tuple
    backward: object  # callable(grad) -> tuple of arrays/None, aligned with inputs
    name: str


@dataclass
class Tape:
    """Ordered record of operations; topological by construction."""

    nodes: list = field(default_factory=list)
    _out_ids: set = field(default_factory=set)

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False

    def record(self, out, inputs, backward, name):
        self.nodes.append(_Node(id(out), inputs, backward, name))
        self._out_ids.add(id(out))


_tape_stack: list = []


def _push_tape(t):
    _tape_stack.append(t)


def _pop_tape(t):
    if not _tape_stack or _tape_stack[-1] is not t:
        raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
    _tape_stack.pop()


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


def _record(out, inputs, backward, name):
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward, name)


def _result(arr, inputs, backward, name):
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = builtins.any(t.requires_grad for t in inputs)
    out.grad = None
    if _debug and not np.isfinite(arr).all():
        raise DomainError(f"{name} produced non-finite values")
    _record(out, inputs, backward, name)
    return out


def backward(loss, tape):
    """Populate grads of every requires_grad leaf with d(loss)/d(leaf).

    Repeated calls without zero_grad accumulate.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._out_ids:
        raise ValueError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if key not in tape._out_ids:
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.accumulate_grad(grads[key])


# ---------------------------------------------------------------------------
# binary elementwise with restricted broadcasting


def _broadcast_ok(a_shape, b_shape):
    if a_shape == b_shape:
        return True
    # scalar operand
    if int(np.prod(b_shape)) == 1 or int(np.prod(a_shape)) == 1:
        return True
    # right operand broadcast over leading axes of the left
    if len(b_shape) < len(a_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape:
        return True
    if len(a_shape) < len(b_shape) and b_shape[len(b_shape) - len(a_shape):] == a_shape:
        return True
    return False


def _reduce_to(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == tuple(shape):
        return grad
    if int(np.prod(shape)) == 1:
        return grad.sum().reshape(shape)
    extra = grad.ndim - len(shape)
    g = grad.sum(axis=tuple(range(extra))) if extra else grad
    return g.reshape(shape)


def _binary(a, b, fwd, da_fn, db_fn, name):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not broadcast-compatible")
    arr = fwd(a.data, b.data)

    def back(g):
        ga = _reduce_to(da_fn(g, a.data, b.data), a.shape) if a.requires_grad else None
        gb = _reduce_to(db_fn(g, a.data, b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(arr, (a, b), back, name)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def scale(x, c):
    """Multiply by a python scalar constant."""
    x = _as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


# ---------------------------------------------------------------------------
# unary elementwise


def _unary(x, fwd, dfn, name, check=None):
    x = _as_tensor(x)
    if _debug and check is not None:
        check(x.data)
    arr = fwd(x.data)

    def back(g, _x=x.data, _y=arr):
        return (dfn(g, _x, _y),)

    return _result(arr, (x,), back, name)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact (erf-form) GELU."""

    def fwd(v):
        return 0.5 * v * (1.0 + _erf(v * _INV_SQRT2))

    def dfn(g, v, y):
        cdf = 0.5 * (1.0 + _erf(v * _INV_SQRT2))
        pdf = np.exp(-0.5 * v * v) * _INV_SQRT_2PI
        return g * (cdf + v * pdf)

    return _unary(x, fwd, dfn, "gelu")


def sigmoid(x):
    def fwd(v):
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out

    return _unary(x, fwd, lambda g, v, y: g * y * (1.0 - y), "sigmoid")


def exp(x):
    return _unary(x, np.exp, lambda g, v, y: g * y, "exp")


def log(x):
    def check(v):
        if (v <= 0).any():
            raise DomainError("log of non-positive value")

    return _unary(x, np.log, lambda g, v, y: g / v, "log", check=check)


def abs(x):  # noqa: A001 - mirrors np.abs naming
    return _unary(x, np.abs, lambda g, v, y: g * np.sign(v), "abs")


def square(x):
    return _unary(x, np.square, lambda g, v, y: g * 2.0 * v, "square")


# ---------------------------------------------------------------------------
# reductions


def _check_axis(x, axis):
    if axis is not None and not (-x.ndim <= axis < x.ndim):
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")


def sum(x, axis=None):  # noqa: A001
    x = _as_tensor(x)
    _check_axis(x, axis)
    arr = np.asarray(x.data.sum(axis=axis))
    if arr.ndim == 0:
        arr = arr.reshape(1)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(arr, (x,), back, "sum")


def mean(x, axis=None):
    x = _as_tensor(x)
    _check_axis(x, axis)
    n = x.size if axis is None else x.shape[axis]
    arr = np.asarray(x.data.mean(axis=axis))
    if arr.ndim == 0:
        arr = arr.reshape(1)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), x.shape).copy() / n,)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy() / n,)

    return _result(arr, (x,), back, "mean")


# ---------------------------------------------------------------------------
# structured ops


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    arr = a.data @ b.data

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(arr, (a, b), back, "matmul")


def bmm(a, b):
    """Batched matmul over a shared leading axis: [B,m,k] x [B,k,n]."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} x {b.shape}")
    arr = a.data @ b.data

    def back(g):
        ga = g @ b.data.swapaxes(-1, -2) if a.requires_grad else None
        gb = a.data.swapaxes(-1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(arr, (a, b), back, "bmm")


def reshape(x, shape):
    x = _as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    arr = x.data.reshape(shape)
    return _result(arr, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} are not a permutation of rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    arr = np.ascontiguousarray(x.data.transpose(axes))
    return _result(arr, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat_rows(parts):
    """Concatenate 2-D tensors along axis 0."""
    parts = [_as_tensor(p) for p in parts]
    width = parts[0].shape[-1]
    for p in parts:
        if p.ndim != 2 or p.shape[-1] != width:
            raise ShapeError(f"concat_rows: inconsistent shapes {[p.shape for p in parts]}")
    arr = np.concatenate([p.data for p in parts], axis=0)
    counts = [p.shape[0] for p in parts]

    def back(g):
        outs = []
        start = 0
        for p, n in zip(parts, counts):
            outs.append(g[start:start + n] if p.requires_grad else None)
            start += n
        return tuple(outs)

    return _result(arr, tuple(parts), back, "concat_rows")


def broadcast_rows(v, n):
    """Tile a length-D vector into an [n, D] matrix; grads sum back."""
    v = _as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"broadcast_rows expects a vector, got shape {v.shape}")
    arr = np.broadcast_to(v.data, (int(n), v.shape[0])).copy()
    return _result(arr, (v,), lambda g: (g.sum(axis=0),), "broadcast_rows")


def index_select(x, idx):
    """Gather rows of a [N, D] tensor; backward scatters additively."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"index_select expects a matrix, got shape {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index_select: indices outside [0, {n})")
    arr = x.data[idx]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(arr, (x,), back, "index_select")


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis, then scale/shift."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    arr = xhat * gamma.data + beta.data

    def back(g):
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = (dxhat - m1 - xhat * m2) * inv
        return gx, gg, gb

    return _result(arr, (x, gamma, beta), back, "layer_norm")


def softmax(x):
    """Row softmax over the last axis, max-subtracted for stability."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _result(s, (x,), back, "softmax")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_input: list

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def grad_check(f, inputs, h=1e-5, tol=1e-4, sample=None, rng=None):
    """Compare analytic gradients of a scalar function against central differences.

    `inputs` is a Tensor or a sequence of Tensors; each is marked
    requires_grad for the check. With `sample`, only that many randomly
    chosen elements per input are probed (for large parameter sets);
    otherwise every element is. Relative error uses a denominator floored
    at 1 so near-zero gradients are compared absolutely.
    """
    single = isinstance(inputs, Tensor)
    xs = [inputs] if single else list(inputs)
    for x in xs:
        x.requires_grad = True
        x.zero_grad()

    def run():
        with Tape() as tape:
            out = f(*xs)
            return out, tape

    out, tape = run()
    backward(out, tape)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]
    for x in xs:
        x.zero_grad()

    rng = rng or np.random.default_rng(0)
    per_input = []
    worst = 0.0
    for x, an in zip(xs, analytic):
        flat = x.data.reshape(-1)
        n = flat.size
        if sample is not None and sample < n:
            positions = rng.choice(n, size=sample, replace=False)
        else:
            positions = np.arange(n)
        err = 0.0
        for pos in positions:
            saved = flat[pos]
            flat[pos] = saved + h
            fp = f(*xs).item()
            flat[pos] = saved - h
            fm = f(*xs).item()
            flat[pos] = saved
            numeric = (fp - fm) / (2.0 * h)
            a = an.reshape(-1)[pos]
            denom = builtins.max(np.abs(a), np.abs(numeric), 1.0)
            err = builtins.max(err, np.abs(a - numeric) / denom)
        per_input.append(float(err))
        worst = builtins.max(worst, err)
    return GradCheckReport(max_rel_error=float(worst), tol=tol, per_input=per_input)
