"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a backward rule.  Calling :func:`backward` on a scalar walks
that graph in reverse topological order and accumulates gradients into the
leaves that require them.

Shapes are checked explicitly on every op.  The only broadcasting allowed is
scalar-with-tensor; biases go through :func:`bias_add`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NumericalError",
    "default_dtype", "shadow_float64", "no_grad", "check_finite",
    "add", "sub", "mul", "neg", "matmul", "relu", "sigmoid", "tanh", "exp",
    "sum", "mean", "concat", "stack", "reshape", "slice", "transpose",
    "softmax", "bias_add", "square", "mse", "backward",
    "AdamState", "adam_step",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NumericalError(FloatingPointError):
    """A NaN or Inf turned up where finite values are required."""


_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = False


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def shadow_float64():
    """Run enclosed tensor creation in float64 (used by gradient checks)."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.float64
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. for inference."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    """Raise :class:`NumericalError` as soon as any op produces NaN/Inf."""
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Tensor:
    """An n-d float array that can take part in autodiff.

    Leaves created with ``requires_grad=True`` start with a zero gradient so
    that a leaf the loss never touches still reports ``grad == 0`` after
    :func:`backward`.  :func:`adam_step` clears gradients back to ``None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op output; record it on the graph when any parent needs grad.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    Layer primitives outside this module build on this.
    """
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out._op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _shape_err(op, a, b):
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _scalarish(x) -> bool:
    return not isinstance(x, Tensor) or x.ndim == 0


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.data.dtype)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # only scalar broadcasting exists, so reduction is all-or-nothing
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _binary_operands(op, a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    ref = a if isinstance(a, Tensor) else b
    a, b = _lift(a, ref), _lift(b, ref)
    if a.shape != b.shape and not (a.ndim == 0 or b.ndim == 0):
        raise _shape_err(op, a.shape, b.shape)
    return a, b


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2 * a.data * g,), "square")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return make_result(out, (a,), lambda g: (g * (out > 0),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return make_result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return make_result(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return make_result(e, (a,), lambda g: (g * e,), "exp")


# ------------------------------------------------------------------ reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axis(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes), dtype=a.data.dtype)

    def bw(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise ShapeError(f"mean over empty axis of shape {a.shape}")
    out = np.asarray(a.data.mean(axis=axes), dtype=a.data.dtype)

    def bw(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return ((np.broadcast_to(g, a.shape) / count).astype(a.data.dtype),)

    return make_result(out, (a,), bw, "mean")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (a,), bw, "softmax")


# -------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across all leading axes of ``a``) or has the
    same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise _shape_err("matmul", a.shape, b.shape)
    shared = b.ndim == 2
    if a.shape[-1] != b.shape[-2] or (not shared and a.shape[:-2] != b.shape[:-2]):
        raise _shape_err("matmul", a.shape, b.shape)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return make_result(a.data @ b.data, (a, b), bw, "matmul")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a bias vector along the last axis of ``x``."""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise _shape_err("bias_add", x.shape, b.shape)

    def bw(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return make_result(x.data + b.data, (x, b), bw, "bias_add")


# ----------------------------------------------------------------- structural

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_err("reshape", a.shape, shape) from None
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inv),), "transpose")


def slice(a: Tensor, index) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing, e.g. ``slice(x, (np.s_[:], 0))``."""
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return make_result(np.array(out), (a,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
                t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise _shape_err("concat", ref.shape, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax),
                       tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ------------------------------------------------------------------------ loss

def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences; gradient flows to ``pred`` only."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != t.shape:
        raise _shape_err("mse", pred.shape, t.shape)
    if pred.size == 0:
        raise ShapeError("mse of empty tensors")
    diff = pred.data - t
    out = np.asarray(np.mean(diff * diff), dtype=pred.data.dtype)
    n = pred.size

    def bw(g):
        return ((2.0 / n) * g * diff).astype(pred.data.dtype),

    return make_result(out, (pred,), bw, "mse")


# -------------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ------------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    """Per-parameter moment estimates for Adam."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **kw) -> "AdamState":
        params = list(params)
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.  Gradients are cleared after."""
    if len(params) != len(state.m):
        raise ValueError(f"AdamState tracks {len(state.m)} parameters, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or i!r} has no gradient")
        if state.m[i].shape != p.shape:
            raise _shape_err("adam_step", state.m[i].shape, p.shape)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.epsilon)
        p.data -= step.astype(p.data.dtype)
        p.grad = None
