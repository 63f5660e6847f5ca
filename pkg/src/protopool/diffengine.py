"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is define-by-run: every operation computes its result eagerly and
records its input tensors plus a backward closure on the output.
:func:`backward` replays those records once, in reverse creation order
(creation order is a topological order by construction), summing gradient
contributions into every tensor that requires them.

Scope is deliberately narrow: the handful of operations the prototype-pool
head needs, 64-bit floats only, and no implicit broadcasting beyond
scalar-with-tensor (all model shapes are known statically, so silent
broadcasting would only hide bugs).  ``reduce_max`` breaks ties toward the
lowest flat index within each reduced slice, and that rule is relied on by
the hard-assignment code.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "add",
    "sub",
    "mul",
    "log",
    "relu",
    "matmul",
    "reduce_max",
    "reduce_mean",
    "softmax",
    "sq_dist_map",
    "pairwise_sq_dist",
    "reshape",
    "transpose",
    "custom_op",
    "backward",
    "finite_diff_check",
    "GradCheckEntry",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes cannot be combined by the requested operation."""


class DomainError(ValueError):
    """An input left the numeric domain of an operation."""


# Monotone creation counter; creation order doubles as topological order.
_CREATION = itertools.count()


class Tensor:
    """Dense float64 array with gradient bookkeeping.

    Leaf tensors are created directly and validated to be finite (NaN/Inf is
    rejected at graph boundaries).  Operation outputs carry references to
    their parents and a backward closure; both are dropped when none of the
    parents requires a gradient, so inference-only graphs stay flat.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.size and not np.isfinite(arr).all():
            raise DomainError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._seq = next(_CREATION)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"

    # Operator sugar; all routed through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    out._op = op
    out._seq = next(_CREATION)
    return out


def custom_op(data, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    """Wrap ``data`` as the output of a hand-defined differentiable op.

    ``backward_fn(out_grad)`` receives the gradient at the output and must
    return one array (or ``None``) per parent, each matching that parent's
    shape; the engine accumulates the contributions.
    """
    return _result(np.asarray(data, dtype=np.float64), parents, op, backward_fn)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return Tensor(float(x))
    if isinstance(x, np.ndarray):
        return Tensor(x)
    raise ShapeError(f"expected Tensor, ndarray or scalar, got {type(x).__name__}")


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither operand is a scalar")


def _fit(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back onto a scalar operand that was broadcast."""
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")

    def backward_fn(g):
        return _fit(g, a.shape), _fit(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")

    def backward_fn(g):
        return _fit(g, a.shape), _fit(-g, b.shape)

    return _result(a.data - b.data, (a, b), "sub", backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")

    def backward_fn(g):
        return _fit(g * b.data, a.shape), _fit(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "mul", backward_fn)


def log(t) -> Tensor:
    t = _as_tensor(t)
    if t.size and np.any(t.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")

    def backward_fn(g):
        return (g / t.data,)

    return _result(np.log(t.data), (t,), "log", backward_fn)


def relu(t) -> Tensor:
    t = _as_tensor(t)
    mask = t.data > 0.0

    def backward_fn(g):
        return (g * mask,)

    return _result(np.where(mask, t.data, 0.0), (t,), "relu", backward_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), "matmul", backward_fn)


def _axis(t: Tensor, axis: int, op: str) -> int:
    if t.ndim == 0 or not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {t.shape}")
    return axis % t.ndim


def reduce_max(t, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient routes to the first (lowest flat
    index) maximising element of each slice."""
    t = _as_tensor(t)
    ax = _axis(t, axis, "reduce_max")
    idx = np.argmax(t.data, axis=ax)

    def backward_fn(g):
        out = np.zeros_like(t.data)
        np.put_along_axis(out, np.expand_dims(idx, ax), np.expand_dims(g, ax), ax)
        return (out,)

    return _result(np.max(t.data, axis=ax), (t,), "reduce_max", backward_fn)


def reduce_mean(t, axis: int) -> Tensor:
    t = _as_tensor(t)
    ax = _axis(t, axis, "reduce_mean")
    n = t.shape[ax]

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), t.shape).copy(),)

    return _result(np.mean(t.data, axis=ax), (t,), "reduce_mean", backward_fn)


def softmax(t, axis: int) -> Tensor:
    """Numerically stabilised softmax along ``axis`` (max subtraction)."""
    t = _as_tensor(t)
    ax = _axis(t, axis, "softmax")
    shifted = t.data - np.max(t.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def backward_fn(g):
        inner = np.sum(g * y, axis=ax, keepdims=True)
        return ((g - inner) * y,)

    return _result(y, (t,), "softmax", backward_fn)


def pairwise_sq_dist(a, b) -> Tensor:
    """All-pairs squared Euclidean distances between the rows of two matrices.

    ``out[i, j] = sum_d (a[i, d] - b[j, d])**2``.  Computed directly from the
    differences (not the expanded-square identity), so results are exactly
    non-negative and each column equals the single-vector distance map for
    that row of ``b`` bit for bit.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: incompatible shapes {a.shape}, {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = (diff * diff).sum(axis=2)

    def backward_fn(g):
        ga = 2.0 * (a.data * g.sum(axis=1)[:, None] - g @ b.data)
        gb = 2.0 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data)
        return ga, gb

    return _result(out, (a, b), "pairwise_sq_dist", backward_fn)


def sq_dist_map(z, p) -> Tensor:
    """Per-row squared distances of a matrix ``z`` [N, D] to one vector ``p`` [D]."""
    z, p = _as_tensor(z), _as_tensor(p)
    if p.ndim != 1:
        raise ShapeError(f"sq_dist_map expects a vector, got shape {p.shape}")
    col = pairwise_sq_dist(z, reshape(p, (1, p.size)))
    return reshape(col, (z.shape[0],))


def reshape(t, shape) -> Tensor:
    t = _as_tensor(t)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} to {shape}")

    def backward_fn(g):
        return (g.reshape(t.shape),)

    return _result(t.data.reshape(shape), (t,), "reshape", backward_fn)


def transpose(t) -> Tensor:
    t = _as_tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {t.shape}")

    def backward_fn(g):
        return (g.T.copy(),)

    return _result(t.data.T.copy(), (t,), "transpose", backward_fn)


def _reachable(root: Tensor) -> list:
    seen: dict = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda n: n._seq)


def backward(t: Tensor) -> None:
    """Accumulate gradients of a scalar-valued graph output into its inputs.

    Every recorded node is visited exactly once, in reverse creation order.
    A tensor consumed by several operations receives the sum of all its
    contributions.
    """
    if t.size != 1:
        raise ShapeError(f"backward requires a scalar output, got shape {t.shape}")
    t.grad = np.ones_like(t.data)
    if not t.requires_grad:
        return
    for node in reversed(_reachable(t)):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


@dataclass
class GradCheckEntry:
    """Comparison of analytic vs central-difference gradients for one tensor."""

    name: str
    max_rel_err: float
    worst_index: int = -1
    note: str = ""


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e.note == "" and e.max_rel_err <= self.tol for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def __str__(self) -> str:
        lines = [f"gradient check (tol={self.tol:g}): {'pass' if self.passed else 'FAIL'}"]
        for e in self.entries:
            extra = f" [{e.note}]" if e.note else ""
            lines.append(f"  {e.name}: max rel err {e.max_rel_err:.3e} at flat index {e.worst_index}{extra}")
        return "\n".join(lines)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    names: Optional[Sequence[str]] = None,
    rel_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` must rebuild its graph on every call and be deterministic given the
    current parameter values (freeze any noise source before calling).  The
    relative error uses ``max(|analytic|, |numeric|, rel_floor)`` as the
    denominator so near-zero gradients are compared on an absolute scale.
    Non-finite values encountered while probing mark the entry as a
    diagnostic failure instead of raising.
    """
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    base = f()
    if base.size != 1:
        raise ShapeError("finite_diff_check requires a scalar-valued function")
    for p in params:
        p.grad = None
    backward(base)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport(tol=tol)
    for name, p, ana in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        worst, worst_i, note = 0.0, -1, ""
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = f().item()
            flat[i] = keep - step
            lo = f().item()
            flat[i] = keep
            if not (np.isfinite(hi) and np.isfinite(lo)):
                worst, worst_i, note = float("inf"), i, "non-finite value during probing"
                break
            numeric = (hi - lo) / (2.0 * step)
            err = abs(ana_flat[i] - numeric) / max(abs(ana_flat[i]), abs(numeric), rel_floor)
            if err > worst:
                worst, worst_i = err, i
        report.entries.append(GradCheckEntry(name=name, max_rel_err=worst, worst_index=worst_i, note=note))
    return report
