"""Dense float64 tensors with tape-based reverse-mode autodiff, plus Adam.

Every primitive accepts either :class:`Tensor` nodes or plain numpy arrays.
When no input is a Tensor the primitive simply returns a numpy array, so the
same model code runs untaped for fast evaluation and taped for training.

A fresh :class:`Tape` is built for every mini-batch (define-by-run)::

    tape = Tape()
    w = tape.variable(np.ones((3, 1)), name="w")
    loss = mean(square(matmul(x, w) - y))
    grads = backward(tape, loss)      # {"w": ndarray}
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    """A node on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index", "parents", "vjp", "name", "op")
    __array_priority__ = 100.0  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, value, tape, parents=(), vjp=None, name=None, op="leaf"):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.op = op
        self.index = tape._record(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of nodes; inputs always precede the ops that use them."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _record(self, node: Tensor) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def variable(self, value, name: Optional[str] = None) -> Tensor:
        return Tensor(np.array(value, dtype=np.float64), self, name=name)

    def variables(self, params: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
        return {k: self.variable(v, name=k) for k, v in params.items()}

    def __len__(self):
        return len(self.nodes)


def value_of(x):
    return x.value if isinstance(x, Tensor) else x


def _tape_of(inputs):
    tape = None
    for x in inputs:
        if isinstance(x, Tensor):
            if tape is not None and x.tape is not tape:
                raise ValueError("inputs recorded on different tapes")
            tape = x.tape
    return tape


def _checked(kind, out):
    out = np.asarray(out, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite result in op '{kind}'")
    return out


def _node(kind, out, inputs, vjp):
    """Finish a primitive: validate, and record on the tape if any input is taped."""
    out = _checked(kind, out)
    tape = _tape_of(inputs)
    if tape is None:
        return out
    return Tensor(out, tape, parents=tuple(inputs), vjp=vjp, op=kind)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {np.shape(a)} and {np.shape(b)}") from None


# -- elementwise binary -------------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape("add", av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    return _node("add", av + bv, (a, b),
                 lambda g: (_unbroadcast(g, sa) if ta else None, _unbroadcast(g, sb) if tb else None))


def subtract(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape("subtract", av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    return _node("subtract", av - bv, (a, b),
                 lambda g: (_unbroadcast(g, sa) if ta else None, _unbroadcast(-g, sb) if tb else None))


def multiply(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape("multiply", av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    return _node("multiply", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, sa) if ta else None,
                            _unbroadcast(g * av, sb) if tb else None))


def divide(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape("divide", av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv

    tb = isinstance(b, Tensor)

    def vjp(g):
        ga = g / bv
        return _unbroadcast(ga, sa), (_unbroadcast(-ga * out, sb) if tb else None)

    return _node("divide", out, (a, b), vjp)


def maximum(a, floor: float):
    """Elementwise max against a constant floor (used for clipping densities)."""
    av = value_of(a)
    mask = av > floor
    return _node("maximum", np.where(mask, av, floor), (a,), lambda g: (g * mask,))


# -- elementwise unary --------------------------------------------------------

def negative(a):
    return _node("negative", -value_of(a), (a,), lambda g: (-g,))


def square(a):
    av = value_of(a)
    return _node("square", av * av, (a,), lambda g: (2.0 * av * g,))


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(value_of(a))
    return _node("exp", out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _node("log", out, (a,), lambda g: (g / av,))


def sigmoid(a):
    av = value_of(a)
    out = np.empty_like(np.asarray(av, dtype=np.float64))
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(value_of(a))
    return _node("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def elu(a):
    """ELU with alpha fixed at 1."""
    av = value_of(a)
    neg = np.expm1(np.minimum(av, 0.0))
    out = np.where(av > 0, av, neg)
    return _node("elu", out, (a,), lambda g: (g * np.where(av > 0, 1.0, neg + 1.0),))


# -- reductions ---------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = value_of(a)
    shape = av.shape
    return _node("sum", np.sum(av, axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    shape = av.shape
    count = av.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    return _node("mean", np.mean(av, axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims) / count,))


def softmax(a, axis=-1):
    av = value_of(a)
    z = np.exp(av - av.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node("softmax", out, (a,), vjp)


def log_softmax(a, axis=-1):
    av = value_of(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _node("log_softmax", out, (a,),
                 lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


# -- linear algebra and shape -------------------------------------------------

def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    return _node("matmul", av @ bv, (a, b),
                 lambda g: (g @ bv.T if ta else None, av.T @ g if tb else None))


def transpose(a):
    return _node("transpose", value_of(a).T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    av = value_of(a)
    old = av.shape
    try:
        out = av.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _node("reshape", out, (a,), lambda g: (g.reshape(old),))


def broadcast(a, shape):
    av = value_of(a)
    old = av.shape
    try:
        out = np.broadcast_to(av, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {old} to {shape}") from None
    return _node("broadcast", out, (a,), lambda g: (_unbroadcast(g, old),))


def concatenate(items: Sequence, axis=-1):
    values = [np.asarray(value_of(x), dtype=np.float64) for x in items]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concatenate: {exc}") from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node("concatenate", out, tuple(items), vjp)


def take(a, key):
    """Basic or fancy indexing (``slice`` in the op list)."""
    av = value_of(a)
    try:
        out = av[key]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None
    shape = av.shape

    basic = not any(isinstance(k, (list, np.ndarray)) for k in (key if isinstance(key, tuple) else (key,)))

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _node("slice", out, (a,), vjp)


def custom(kind: str, out, inputs: Sequence, vjp: Callable):
    """Register a caller-defined primitive (value already computed)."""
    return _node(kind, out, tuple(inputs), vjp)


OPS: Dict[str, Callable] = {
    "matmul": matmul, "add": add, "multiply": multiply, "subtract": subtract,
    "divide": divide, "square": square, "mean": mean, "sum": sum, "elu": elu,
    "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "softmax": softmax,
    "log_softmax": log_softmax, "concatenate": concatenate, "slice": take,
    "broadcast": broadcast, "reshape": reshape, "transpose": transpose,
    "negative": negative, "maximum": maximum,
}


def forward(kind: str, *inputs, **kwargs):
    """Apply a primitive by name, e.g. ``forward("elu", x)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op '{kind}'") from None
    if kind == "concatenate":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


def backward(tape: Tape, root: Tensor) -> Dict[str, np.ndarray]:
    """Reverse sweep from a scalar root; returns adjoints of the named leaves.

    Named leaves that do not influence the root get zero gradients.
    """
    if not isinstance(root, Tensor) or root.tape is not tape:
        raise ValueError("root must be a Tensor recorded on this tape")
    if root.value.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
    adjoints: list = [None] * len(tape.nodes)
    adjoints[root.index] = np.ones_like(root.value)
    for node in reversed(tape.nodes[: root.index + 1]):
        g = adjoints[node.index]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not isinstance(parent, Tensor):
                continue
            prev = adjoints[parent.index]
            # never accumulate in place: vjps may return views of other adjoints
            adjoints[parent.index] = pg if prev is None else prev + pg
    grads = {}
    for node in tape.nodes:
        if node.name is not None and node.vjp is None:
            g = adjoints[node.index]
            grads[node.name] = np.zeros_like(node.value) if g is None else np.array(g, dtype=np.float64).reshape(node.value.shape)
    return grads


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments for one parameter group.

    Weight decay is decoupled: ``theta -= lr * decay * theta`` after the
    moment-based step.
    """

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], lr: float, weight_decay: float = 0.0):
        return cls(lr=lr, weight_decay=weight_decay,
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """Update ``params`` in place for the names tracked by ``state``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, m in state.m.items():
        p, g = params[name], grads[name]
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam: shape mismatch for '{name}': {p.shape}, {g.shape}, {m.shape}")
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
    return params, state


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total
