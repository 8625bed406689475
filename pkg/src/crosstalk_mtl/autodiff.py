"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations executed while a :class:`Tape` is active are appended to it in
execution order, so every node only references earlier nodes.  Calling
:meth:`Tape.backward` on a scalar result walks the tape once in reverse.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)[x]
    array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError, TapeError

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional array, optionally tracked for gradients.

    ``data`` is a numpy array in row-major order.  Tensors are treated as
    values: operations never modify their inputs.  The only sanctioned
    in-place writers are the optimizer (between batches) and
    :func:`grad_check` (which restores what it perturbs).
    """

    __slots__ = ("data", "requires_grad", "name", "_tape", "_node_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                arr = data
            else:
                arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> int | None:
        return self._node_id

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def check_finite(self, context: str = "") -> Tensor:
        if not np.all(np.isfinite(self.data)):
            where = f" in {context}" if context else ""
            raise DomainError(f"non-finite values{where}")
        return self

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce("max", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Node:
    kind: str
    inputs: tuple[int | None, ...]
    backward: BackwardFn | None
    leaf: Tensor | None = None


@dataclass
class Tape:
    """Append-only record of the operations of one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)
    _leaf_ids: dict[int, int] = field(default_factory=dict, repr=False)

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _node_of(self, t: Tensor) -> int:
        if t._tape is self and t._node_id is not None:
            return t._node_id
        key = id(t)
        nid = self._leaf_ids.get(key)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), None, leaf=t))
            self._leaf_ids[key] = nid
        return nid

    def _append(self, kind: str, inputs: tuple[int | None, ...], backward: BackwardFn) -> int:
        self.nodes.append(Node(kind, inputs, backward))
        return len(self.nodes) - 1

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate d(root)/d(node) to every node; return leaf gradients."""
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root._tape is not self or root._node_id is None:
            raise TapeError("root is not connected to this tape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root._node_id] = np.ones(root.shape, dtype=root.dtype)
        for nid in range(root._node_id, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            for inp, ig in zip(node.inputs, node.backward(g)):
                if inp is None or ig is None:
                    continue
                prev = grads[inp]
                grads[inp] = ig if prev is None else prev + ig
        self.gradients = {i: g for i, g in enumerate(grads) if g is not None}
        out: dict[Tensor, np.ndarray] = {}
        for nid, node in enumerate(self.nodes):
            if node.leaf is not None:
                g = grads[nid]
                out[node.leaf] = np.zeros_like(node.leaf.data) if g is None else g
        return out


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``root`` along the tape that produced it."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._tape is None:
        raise TapeError("root was not computed under an active tape")
    return root._tape.backward(root)


def apply_op(kind: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the result of an operation and record it if taped.

    ``backward_fn`` maps the upstream gradient to one gradient (or None) per
    parent, in order.
    """
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        ids = tuple(tape._node_of(p) if p.requires_grad else None for p in parents)
        out.requires_grad = True
        out._tape = tape
        out._node_id = tape._append(kind, ids, backward_fn)
    return out


# ---------------------------------------------------------------- broadcasting

def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    # one operand must broadcast onto the other; no mutual expansion
    try:
        shape = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a} and {b}") from None
    if shape != a and shape != b:
        raise ShapeError(f"shapes {a} and {b} need mutual broadcasting")
    return shape


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return apply_op("add", a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return apply_op("sub", a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return apply_op(
        "mul", ad * bd, (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return apply_op("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply_op("relu", np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return apply_op("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return apply_op("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return apply_op("log", np.log(x), (a,), lambda g: (g / x,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch an elementwise op by name; ``scale`` takes a float as ``b``."""
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, _as_tensor(b, a.dtype))
    if op_kind == "scale":
        return scale(a, float(b))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    ad, bd = a.data, b.data
    return apply_op("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------- reductions

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op_kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in ax else n for i, n in enumerate(shape))
    if op_kind == "sum":
        y = a.data.sum(axis=ax, keepdims=True)
        back = lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),)
    elif op_kind == "mean":
        n = int(np.prod([shape[i] for i in ax])) if ax else 1
        y = a.data.mean(axis=ax, keepdims=True)
        inv = a.dtype.type(1.0 / n)
        back = lambda g: (np.broadcast_to(g.reshape(kept) * inv, shape).copy(),)
    elif op_kind == "max":
        y = a.data.max(axis=ax, keepdims=True)
        # route to the first maximal element only (deterministic argmax)
        moved = np.moveaxis(a.data, ax, tuple(range(a.ndim - len(ax), a.ndim)))
        flat = moved.reshape(moved.shape[: a.ndim - len(ax)] + (-1,))
        arg = flat.argmax(axis=-1)

        def back(g):
            gf = np.zeros_like(flat)
            np.put_along_axis(gf, arg[..., None], g.reshape(arg.shape)[..., None], axis=-1)
            gm = gf.reshape(moved.shape)
            return (np.moveaxis(gm, tuple(range(a.ndim - len(ax), a.ndim)), ax),)
    else:
        raise ValueError(f"unknown reduction {op_kind!r}")
    if not keepdims:
        y = y.reshape(tuple(n for i, n in enumerate(shape) if i not in ax))
    return apply_op(op_kind, y, (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return apply_op("softmax", s, (a,), back)


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of nothing")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat shapes {ref} and {t.shape} disagree off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in tensors], axis=ax)
    return apply_op("concat", y, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)))


def slice_axis(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    ax = axis % a.ndim
    if start < 0 or length < 0 or start + length > a.shape[ax]:
        raise ShapeError(f"slice [{start}, {start + length}) outside axis of size {a.shape[ax]}")
    idx = tuple(slice(start, start + length) if i == ax else slice(None) for i in range(a.ndim))
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return apply_op("slice", a.data[idx].copy(), (a,), back)


def reshape(a: Tensor, new_shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(n) for n in new_shape)
    if -1 in new_shape:
        try:
            new_shape = np.empty(a.shape, dtype=np.bool_).reshape(new_shape).shape
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} to {new_shape}") from None
    if int(np.prod(new_shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {new_shape}")
    shape = a.shape
    return apply_op("reshape", a.data.reshape(new_shape), (a,), lambda g: (g.reshape(shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply_op("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------- verification

@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    tol: float
    worst: tuple[int, tuple[int, ...]] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Iterable[Tensor],
    step: float = 1e-5,
    tol: float = 1e-5,
    abs_floor: float = 1e-4,
    max_per_input: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare taped gradients of scalar ``f(*inputs)`` with central differences.

    The relative error of an element is ``|a - n| / max(|a|, |n|, abs_floor)``;
    the floor keeps round-off in near-zero gradients from dominating.  With
    ``max_per_input`` set, a seeded random subset of each input is probed.
    Inputs are perturbed in place and restored bit-exactly.
    """
    xs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for x in xs:
        if x.dtype != np.float64:
            raise DomainError("grad_check requires float64 inputs")
        if not np.all(np.isfinite(x.data)):
            raise DomainError("grad_check input contains non-finite values")
    with Tape() as tape:
        out = f(*xs)
    if out.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(out.data)):
        raise DomainError("function value is non-finite")
    grads = tape.backward(out) if out.requires_grad else {}

    def value() -> float:
        v = f(*xs).data
        if not np.all(np.isfinite(v)):
            raise DomainError("function value is non-finite under perturbation")
        return float(v.reshape(-1)[0])

    rng = np.random.default_rng(seed)
    max_rel = max_abs = 0.0
    worst = None
    n = 0
    for k, x in enumerate(xs):
        analytic = grads.get(x, np.zeros_like(x.data))
        flat = x.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_per_input is not None and flat.size > max_per_input:
            idxs = np.sort(rng.choice(flat.size, size=max_per_input, replace=False))
        a_flat = analytic.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            a = float(a_flat[i])
            err = abs(a - num)
            rel = err / max(abs(a), abs(num), abs_floor)
            n += 1
            max_abs = max(max_abs, err)
            if rel > max_rel:
                max_rel = rel
                worst = (k, np.unravel_index(i, x.shape))
    return GradCheckReport(max_rel, max_abs, n, tol, worst)
