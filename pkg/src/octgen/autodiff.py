"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray plus an optional gradient tape node.  Ops build the
tape eagerly; calling ``backward()`` on a scalar loss walks the tape in
reverse topological order and accumulates ``.grad`` arrays on every tensor
reachable from the loss that has ``requires_grad`` set.

Design points:
  * float32 by default, float64 available for gradient checking
    (``default_dtype`` / ``use_dtype``).
  * every op output is checked for NaN/Inf unless ``set_check_finite(False)``.
  * gather/scatter over edge index arrays are first-class ops; hot paths use
    precomputed ``SegPlan`` objects so neither direction ever falls back to
    ``np.add.at``.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NonFiniteValue, NonScalarLossBackward, ShapeMismatch

_DEFAULT_DTYPE = np.float32
_CHECK_FINITE = True
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def set_check_finite(enabled: bool):
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _check(arr, op):
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"non-finite values produced by op '{op}'")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_grad_borrowed")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._grad_borrowed = False

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __getitem__(self, key):
        return slice_(self, key)

    # -- backward pass -------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise NonScalarLossBackward(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        self._grad_borrowed = False
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor(_check(data, op))
    if _GRAD_ENABLED:
        live = tuple(p for p in parents if p.requires_grad or p._parents)
        if live:
            out._parents = live
            out._backward = backward
            out.requires_grad = True
    return out


def _accum(t, g):
    """Accumulate gradient; the first contribution is held by reference
    (never mutated) and only copied if a second contribution arrives."""
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        if g.dtype != t.data.dtype or g.shape != t.data.shape:
            g = np.ascontiguousarray(g, dtype=t.data.dtype).reshape(t.data.shape)
            t._grad_borrowed = False
        else:
            t._grad_borrowed = True
        t.grad = g
    elif t._grad_borrowed:
        t.grad = t.grad + g
        t._grad_borrowed = False
    else:
        t.grad += g


def _unbroadcast(grad, shape):
    """Reduce grad back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward, "neg")


def pow_const(a, exponent):
    a = as_tensor(a)
    e = float(exponent)

    def backward(g):
        _accum(a, g * e * a.data ** (e - 1.0))

    return _make(a.data**e, (a,), backward, "pow")


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul inner dims disagree: {a.shape} @ {b.shape}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def slice_(a, key):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accum(a, full)

    return _make(a.data[key], (a,), backward, "slice")


def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), backward, "transpose")


# -- reductions ------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge, a.data.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.data.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge / count, a.data.shape))

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


# -- nonlinearities ------------------------------------------------------------


def sigmoid(a):
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), backward, "sigmoid")


def silu(a):
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * s * (1.0 + a.data * (1.0 - s)))

    return _make(a.data * s, (a,), backward, "silu")


def softplus(a):
    a = as_tensor(a)
    # log1p(exp(x)) with the standard overflow-safe rewrite
    out = np.where(a.data > 0, a.data + np.log1p(np.exp(-np.abs(a.data))), np.log1p(np.exp(a.data)))

    def backward(g):
        _accum(a, g / (1.0 + np.exp(-a.data)))

    return _make(out, (a,), backward, "softplus")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def abs_(a):
    a = as_tensor(a)
    sign = np.sign(a.data)

    def backward(g):
        _accum(a, g * sign)

    return _make(np.abs(a.data), (a,), backward, "abs")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _make(out, (a,), backward, "exp")


def log(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out)

    return _make(out, (a,), backward, "sqrt")


def clamp(a, lo, hi):
    """Clamp with pass-through gradient inside [lo, hi], zero outside."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accum(a, g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), backward, "clamp")


# -- gather / scatter ---------------------------------------------------------


class SegPlan:
    """Precomputed routing of E rows onto n_out rows via an index array.

    ``reduce(x)`` sums rows of x into their target rows; ``spread(y)`` is the
    adjoint (gather).  Built once per graph, reused every step; forward and
    backward both run on np.take / np.add.reduceat, never np.add.at.
    """

    __slots__ = ("idx", "n_out", "order", "sorted_idx", "starts", "rows", "counts")

    def __init__(self, idx, n_out, assume_sorted=False):
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        self.idx = idx
        self.n_out = int(n_out)
        if assume_sorted or idx.size == 0 or np.all(idx[1:] >= idx[:-1]):
            self.order = None
            sidx = idx
        else:
            self.order = np.argsort(idx, kind="stable")
            sidx = idx[self.order]
        self.sorted_idx = sidx
        if sidx.size:
            self.rows, self.starts, self.counts = np.unique(sidx, return_index=True, return_counts=True)
        else:
            self.rows = np.zeros(0, np.int64)
            self.starts = np.zeros(0, np.int64)
            self.counts = np.zeros(0, np.int64)

    def reduce(self, x):
        out = np.zeros((self.n_out,) + x.shape[1:], dtype=x.dtype)
        if self.sorted_idx.size:
            xs = x if self.order is None else np.take(x, self.order, axis=0)
            out[self.rows] = np.add.reduceat(xs, self.starts, axis=0)
        return out

    def spread(self, y):
        g = np.take(y, self.idx, axis=0)
        return g


def gather(a, idx, plan: SegPlan | None = None):
    """Row gather a[idx]; backward scatter-adds into a.

    Passing a SegPlan built over ``idx`` (with n_out = a rows) keeps the
    backward on the sorted fast path.
    """
    a = as_tensor(a)
    idx = np.asarray(idx)
    if plan is None:
        local = SegPlan(idx, a.data.shape[0])
    else:
        local = plan

    def backward(g):
        _accum(a, local.reduce(g))

    return _make(np.take(a.data, idx, axis=0), (a,), backward, "gather")


def scatter_add(a, idx, n_out, plan: SegPlan | None = None):
    """Rows of ``a`` summed into an (n_out, ...) array at rows ``idx``."""
    a = as_tensor(a)
    local = plan if plan is not None else SegPlan(idx, n_out)

    def backward(g):
        _accum(a, local.spread(g))

    return _make(local.reduce(a.data), (a,), backward, "scatter_add")


def segment_sum(a, plan: SegPlan):
    """scatter_add with a prebuilt plan (alias used by graph layers)."""
    return scatter_add(a, plan.idx, plan.n_out, plan=plan)


# -- sparse message passing ------------------------------------------------


def spmm(mat, mat_t, x):
    """Constant sparse matrix times dense tensor; mat_t is the precomputed
    transpose used by the backward pass."""
    x = as_tensor(x)

    def backward(g):
        _accum(x, mat_t @ g)

    return _make(mat @ x.data, (x,), backward, "spmm")


class GraphPlan:
    """Stacked per-kind adjacency for one graph level.

    S has shape (K*n, n): block k holds the kind-k mean-aggregation matrix
    (row i averages the kind-k in-neighbors of vertex i; kind 0 is the
    identity/self block).  ``gather_cat`` applies all kinds in one sparse
    matmul and lays the result out as (n, K*C).
    """

    __slots__ = ("n", "kinds", "_coo", "_mats")

    def __init__(self, n, kinds, rows, cols, vals):
        self.n = int(n)
        self.kinds = int(kinds)
        self._coo = (rows, cols, vals)
        self._mats = {}

    def mats(self, dtype):
        key = np.dtype(dtype).name
        if key not in self._mats:
            import scipy.sparse as sp

            rows, cols, vals = self._coo
            S = sp.csr_matrix(
                (vals.astype(dtype), (rows, cols)), shape=(self.kinds * self.n, self.n)
            )
            ST = sp.csr_matrix(S.T)
            self._mats[key] = (S, ST)
        return self._mats[key]


def graph_cat(x, plan: GraphPlan):
    """All-kind neighborhood gather: (n, C) -> (n, K*C), kind-major blocks."""
    x = as_tensor(x)
    n, k = plan.n, plan.kinds
    c = x.data.shape[1]
    S, ST = plan.mats(x.data.dtype)

    def backward(g):
        gg = np.ascontiguousarray(g.reshape(n, k, c).transpose(1, 0, 2)).reshape(k * n, c)
        _accum(x, ST @ gg)

    y = (S @ x.data).reshape(k, n, c).transpose(1, 0, 2).reshape(n, k * c)
    return _make(np.ascontiguousarray(y), (x,), backward, "graph_cat")


# -- normalization --------------------------------------------------------


def group_norm(a, gamma, beta, group_size=8, eps=1e-5):
    """Per-row normalization over channel groups of ``group_size``.

    a: (N, C) with C divisible by group_size; gamma/beta: (C,).
    Composite of primitive ops, so the backward pass comes for free.
    """
    a = as_tensor(a)
    n, c = a.data.shape
    if c % group_size != 0:
        raise ShapeMismatch(f"channels {c} not divisible by group size {group_size}")
    g = c // group_size
    x = reshape(a, (n, g, group_size))
    mu = mean(x, axis=2, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=2, keepdims=True)
    xn = div(xc, sqrt(add(var, eps)))
    out = reshape(xn, (n, c))
    return add(mul(out, gamma), beta)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Per-row normalization over all channels (group == full width)."""
    a = as_tensor(a)
    return group_norm(a, gamma, beta, group_size=a.data.shape[1], eps=eps)


@contextlib.contextmanager
def no_grad():
    """Disable tape construction; samplers and eval loops run under this."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev
