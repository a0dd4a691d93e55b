"""Minimal reverse-mode differentiation over dense float64 tensors.

Operations are recorded on the active :class:`Tape` (entered with ``with Tape()``)
whenever at least one input requires a gradient. Shapes never broadcast
implicitly; :func:`broadcast_to` is the single explicit expansion primitive.
"""
from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "salrank_active_tape", default=None
)


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable float64 array, optionally a leaf or node of a tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; every method maps onto one primitive
    def __add__(self, other):
        if _is_scalar(other):
            return add(self, constant_like(self, other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return sub(self, constant_like(self, other))
        return sub(self, other)

    def __rsub__(self, other):
        if _is_scalar(other):
            return sub(constant_like(self, other), self)
        return sub(other, self)

    def __mul__(self, other):
        if _is_scalar(other):
            return scalar_mul(self, float(other))
        return mul_elementwise(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_scalar(other):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant_like(t: Tensor, value: float) -> Tensor:
    return Tensor(np.full(t.shape, float(value)))


@dataclass
class Node:
    kind: str
    inputs: tuple[Optional[int], ...]
    saved: tuple = ()
    backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None


@dataclass
class Tape:
    """Append-only record of one forward pass.

    Node ids are list positions, so every input id is smaller than the id of
    the node consuming it. Leaves (parameters, inputs) are registered the first
    time an operation sees them; the same leaf may appear on many tapes.
    """

    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, Tensor] = field(default_factory=dict)
    _leaf_ids: dict[int, int] = field(default_factory=dict)
    _leaf_refs: list[Tensor] = field(default_factory=list)
    _token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def id_of(self, t: Tensor) -> Optional[int]:
        if not t.requires_grad:
            return None
        if t.node_id is not None and t._tape is not None:
            if t._tape is not self:
                raise RuntimeError("tensor belongs to a different tape")
            return t.node_id
        key = id(t)
        if key not in self._leaf_ids:
            self._leaf_ids[key] = len(self.nodes)
            self._leaf_refs.append(t)
            self.nodes.append(Node("leaf", ()))
        return self._leaf_ids[key]

    def grad(self, t: Tensor) -> Optional[Tensor]:
        """Gradient of the last backward root w.r.t. ``t`` (None if unreachable)."""
        if t.node_id is not None and t._tape is self:
            nid = t.node_id
        else:
            nid = self._leaf_ids.get(id(t))
        if nid is None:
            return None
        return self.gradients.get(nid)

    def backward(self, root: Tensor) -> dict[int, Tensor]:
        return backward(self, root)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def _record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn, saved=()) -> Tensor:
    result = Tensor(out)
    tape = _ACTIVE_TAPE.get()
    if tape is None or not any(t.requires_grad for t in inputs):
        return result
    ids = tuple(tape.id_of(t) for t in inputs)
    result.requires_grad = True
    result.node_id = len(tape.nodes)
    result._tape = tape
    tape.nodes.append(Node(kind, ids, saved, backward_fn))
    return result


def backward(tape: Tape, root: Tensor) -> dict[int, Tensor]:
    """Fill ``tape.gradients`` with d(root)/d(node) for every reachable node."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._tape is not tape or root.node_id is None:
        raise RuntimeError("root was not produced on this tape")
    grads: dict[int, np.ndarray] = {root.node_id: np.ones(root.shape)}
    for nid in range(root.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward_fn is None:
            continue
        for in_id, in_grad in zip(node.inputs, node.backward_fn(g)):
            if in_id is None or in_grad is None:
                continue
            if in_id in grads:
                grads[in_id] = grads[in_id] + in_grad
            else:
                grads[in_id] = in_grad
    tape.gradients = {k: Tensor(v) for k, v in grads.items()}
    return tape.gradients


def grad(f: Callable[..., Tensor], *args: Tensor) -> tuple[float, list[np.ndarray]]:
    """Evaluate scalar ``f(*args)`` on a fresh tape; return value and input gradients."""
    with Tape() as tape:
        out = f(*args)
    backward(tape, out)
    grads = []
    for a in args:
        g = tape.grad(a)
        grads.append(np.zeros(a.shape) if g is None else g.data)
    return out.item(), grads


# ---------------------------------------------------------------------------
# primitives


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul_elementwise(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul_elementwise", a, b)
    ad, bd = a.data, b.data
    return _record("mul_elementwise", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def scalar_mul(x: ArrayLike, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _record("scalar_mul", x.data * c, (x,), lambda g: (g * c,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must be identical, or one operand may be a plain 2-D
    matrix shared across the other's batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if ad.ndim == 2 and ga.ndim > 2:
            ga = ga.reshape(-1, *ad.shape).sum(axis=0)
        if bd.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *bd.shape).sum(axis=0)
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), back)


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose: need ndim >= 2, got shape {x.shape}")
        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _record(
        "transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),)
    )


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    src = x.shape
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def concat_lastdim(xs: Sequence[ArrayLike]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat_lastdim: no inputs")
    lead = xs[0].shape[:-1]
    for x in xs:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat_lastdim: shape mismatch {xs[0].shape} vs {x.shape}")
    splits = np.cumsum([x.shape[-1] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=-1)
    return _record(
        "concat_lastdim", out, xs, lambda g: tuple(np.split(g, splits, axis=-1))
    )


def slice_(x: ArrayLike, index) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices, Ellipsis, None."""
    x = as_tensor(x)
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not (part is None or part is Ellipsis or isinstance(part, (slice, int, np.integer))):
            raise ShapeError(f"slice: unsupported index {part!r}")
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {x.shape}") from None
    src = x.shape

    def back(g):
        full = np.zeros(src)
        full[index] += g
        return (full,)

    return _record("slice", np.array(out), (x,), back)


def _check_axis(kind: str, x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{kind}: invalid axis {axis} for shape {x.shape}")
    return axis % x.ndim


def sum_axis(x: ArrayLike, axis: int, keepdims: bool = False, order_invariant: bool = False) -> Tensor:
    """Sum along ``axis``.

    With ``order_invariant`` the terms are sorted first, so any permutation of
    them along the axis gives a bit-identical result.
    """
    x = as_tensor(x)
    axis = _check_axis("sum_axis", x, axis)
    src = x.shape
    if order_invariant:
        # sequential accumulation: numpy's vectorised sum can depend on memory alignment
        terms = np.moveaxis(np.sort(x.data, axis=axis), axis, 0)
        out = np.zeros(terms.shape[1:])
        for term in terms:
            out = out + term
        out = np.expand_dims(out, axis) if keepdims else out
    else:
        out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum_axis", out, (x,), back)


def mean_axis(x: ArrayLike, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis("mean_axis", x, axis)
    src = x.shape
    n = src[axis]

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _record("mean_axis", x.data.mean(axis=axis, keepdims=keepdims), (x,), back)


def total_sum(x: ArrayLike) -> Tensor:
    """Sum of every element as a shape-(1,) tensor."""
    x = as_tensor(x)
    return sum_axis(reshape(x, (x.size,)), 0, keepdims=True)


def broadcast_to(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    """Explicit expansion of size-1 (or missing leading) axes."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}") from None
    src = x.shape
    extra = len(shape) - len(src)

    def back(g):
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _record("broadcast_to", out, (x,), back)


def relu(x: ArrayLike) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0. NaN propagates."""
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask | np.isnan(x.data), x.data, 0.0)
    return _record("relu", out, (x,), lambda g: (g * mask,))


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax_axis(x: ArrayLike, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis("softmax_axis", x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax_axis", out, (x,), back)


def log_softmax_axis(x: ArrayLike, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis("log_softmax_axis", x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax_axis", out, (x,), back)


def layer_norm_lastdim(x: ArrayLike, eps: float = 1e-10) -> Tensor:
    """Zero-mean, unit-variance normalisation over the last axis (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _record("layer_norm_lastdim", out, (x,), back)


def max_elementwise_pair(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise max; ties send the whole gradient to ``a``. NaN in either input propagates."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("max_elementwise_pair", a, b)
    pick_a = a.data >= b.data
    out = np.where(pick_a | np.isnan(a.data), a.data, b.data)
    return _record(
        "max_elementwise_pair", out, (a, b), lambda g: (g * pick_a, g * ~pick_a)
    )


def min_elementwise_pair(a: ArrayLike, b: ArrayLike) -> Tensor:
    return -max_elementwise_pair(-as_tensor(a), -as_tensor(b))


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _record("log", np.log(d), (x,), lambda g: (g / d,))


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def abs_(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul_elementwise,
    "scalar_mul": scalar_mul,
    "transpose": transpose,
    "reshape": reshape,
    "concat_lastdim": concat_lastdim,
    "slice": slice_,
    "mean_axis": mean_axis,
    "sum_axis": sum_axis,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax_axis": softmax_axis,
    "layer_norm_lastdim": layer_norm_lastdim,
    "max_elementwise_pair": max_elementwise_pair,
    # extensions needed by the losses and the matrix square root
    "broadcast_to": broadcast_to,
    "div": div,
    "log": log,
    "sqrt": sqrt,
    "abs": abs_,
    "log_softmax_axis": log_softmax_axis,
}


def primitive_forward(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_relative_error: float
    passed: bool
    worst_index: Optional[tuple[int, ...]] = None
    message: str = ""


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: ArrayLike,
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Relative error per component is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        return GradCheckReport(math.inf, False, None, "non-finite value at the base point")
    backward(tape, out)
    g = tape.grad(leaf)
    analytic = np.zeros(base.shape) if g is None else g.data

    worst, worst_idx = 0.0, None
    for idx in np.ndindex(base.shape):
        probe = base.copy()
        probe[idx] += eps
        with np.errstate(all="ignore"):
            fp = f(Tensor(probe)).item()
            probe[idx] -= 2 * eps
            fm = f(Tensor(probe)).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            return GradCheckReport(math.inf, False, idx, f"non-finite value while probing {idx}")
        numeric = (fp - fm) / (2 * eps)
        a = analytic[idx]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        if rel > worst or worst_idx is None:
            worst, worst_idx = rel, idx
    return GradCheckReport(worst, worst < tol, worst_idx)
