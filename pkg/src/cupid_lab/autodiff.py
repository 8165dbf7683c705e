"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation goes through :func:`record`, which looks the
operation up in :data:`PRIMITIVES`, validates shapes, evaluates the forward
value and, if any input lives on a :class:`Tape`, appends a node holding the
parent ids and the saved forward values.  :meth:`Tape.backward` then walks the
tape once in reverse order.

Tensors that are not on a tape are plain constants: operations on them are
evaluated eagerly and nothing is recorded.  Finite-difference checks use this
to re-run a model without paying for the tape.

Elementwise binary operations accept equal shapes or a scalar (shape ``()``)
on either side; there is no other broadcasting.  ``bias_add`` is the one
explicit exception, adding a ``[d]`` row vector to every row of ``[n, d]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Primitive:
    name: str
    check: Callable[..., None]
    forward: Callable[..., np.ndarray]
    # vjp(g, out, inputs, **attrs) -> one gradient per input
    vjp: Callable[..., tuple]


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, check, forward, vjp):
    PRIMITIVES[name] = Primitive(name, check, forward, vjp)


# --- shape checks -----------------------------------------------------------


def _fmt(shapes):
    return " vs ".join(str(list(s)) for s in shapes)


def _check_elementwise(name, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{name}: incompatible shapes {_fmt([a.shape, b.shape])}")


def _check_unary(name, a):
    pass


def _check_matmul(name, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"{name}: incompatible shapes {_fmt([a.shape, b.shape])}")


def _check_bias_add(name, x, b):
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"{name}: incompatible shapes {_fmt([x.shape, b.shape])}")


def _check_prelu(name, x, a):
    if a.ndim != 0:
        raise ShapeError(f"{name}: slope must be a scalar, got shape {list(a.shape)}")


def _check_rows(name, x):
    if x.ndim not in (1, 2):
        raise ShapeError(f"{name}: expected a vector or matrix, got shape {list(x.shape)}")


def _unbroadcast(g, shape):
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


# --- primitives -------------------------------------------------------------

_register(
    "add",
    _check_elementwise,
    lambda a, b: a + b,
    lambda g, out, ins: (_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)),
)
_register(
    "sub",
    _check_elementwise,
    lambda a, b: a - b,
    lambda g, out, ins: (_unbroadcast(g, ins[0].shape), _unbroadcast(-g, ins[1].shape)),
)
_register(
    "mul",
    _check_elementwise,
    lambda a, b: a * b,
    lambda g, out, ins: (
        _unbroadcast(g * ins[1], ins[0].shape),
        _unbroadcast(g * ins[0], ins[1].shape),
    ),
)
_register("neg", _check_unary, lambda a: -a, lambda g, out, ins: (-g,))
_register(
    "matmul",
    _check_matmul,
    lambda a, b: a @ b,
    lambda g, out, ins: (g @ ins[1].T, ins[0].T @ g),
)
_register(
    "bias_add",
    _check_bias_add,
    lambda x, b: x + b,
    lambda g, out, ins: (g, g.sum(axis=0)),
)
_register(
    "sigmoid",
    _check_unary,
    expit,
    lambda g, out, ins: (g * out * (1.0 - out),),
)
_register(
    "relu",
    _check_unary,
    lambda x: np.maximum(x, 0.0),
    lambda g, out, ins: (g * (ins[0] > 0),),
)
_register(
    "leaky_relu",
    _check_unary,
    lambda x, slope=0.01: np.where(x > 0, x, slope * x),
    lambda g, out, ins, slope=0.01: (g * np.where(ins[0] > 0, 1.0, slope),),
)
_register(
    "prelu",
    _check_prelu,
    lambda x, a: np.where(x > 0, x, a * x),
    lambda g, out, ins: (
        g * np.where(ins[0] > 0, 1.0, ins[1]),
        np.asarray((g * np.where(ins[0] > 0, 0.0, ins[0])).sum()),
    ),
)
def _quiet(fn):
    # overflow and log(0) are reported by the finiteness check in record()
    def wrapped(x):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return fn(x)
    return wrapped


_register("exp", _check_unary, _quiet(np.exp), lambda g, out, ins: (g * out,))
_register("log", _check_unary, _quiet(np.log), lambda g, out, ins: (g / ins[0],))


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


_register(
    "softmax",
    _check_rows,
    _softmax,
    lambda g, out, ins: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
)
_register(
    "log_softmax",
    _check_rows,
    _log_softmax,
    lambda g, out, ins: (g - np.exp(out) * g.sum(axis=-1, keepdims=True),),
)
_register(
    "l1",
    _check_unary,
    lambda x: np.asarray(np.abs(x).sum()),
    lambda g, out, ins: (g * np.sign(ins[0]),),
)
_register(
    "sqnorm",
    _check_unary,
    lambda x: np.asarray((x * x).sum()),
    lambda g, out, ins: (2.0 * g * ins[0],),
)
_register(
    "sum",
    _check_unary,
    lambda x: np.asarray(x.sum()),
    lambda g, out, ins: (np.full(ins[0].shape, g),),
)
_register(
    "mean",
    _check_unary,
    lambda x: np.asarray(x.mean()),
    lambda g, out, ins: (np.full(ins[0].shape, g / max(ins[0].size, 1)),),
)


# --- tape and tensor --------------------------------------------------------


class _Node:
    __slots__ = ("kind", "parents", "inputs", "output", "attrs")

    def __init__(self, kind, parents, inputs, output, attrs):
        self.kind = kind
        self.parents = parents
        self.inputs = inputs
        self.output = output
        self.attrs = attrs


class Tape:
    """Ordered record of primitive applications.

    Not thread-safe; use one tape per thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.visits = 0

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> "Tensor":
        # no copy: recorded values are never modified in place
        data = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), (), data, {}))
        return Tensor(data, self, len(self.nodes) - 1)

    def leaves(self, arrays: Mapping[str, np.ndarray]) -> dict[str, "Tensor"]:
        return {name: self.leaf(a) for name, a in arrays.items()}

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Gradients of scalar ``loss`` keyed by node id.

        Every leaf on the tape gets an entry; leaves that do not influence
        ``loss`` get zeros.
        """
        if loss.tape is not self:
            raise ValueError("loss is not recorded on this tape")
        if loss.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones(())}
        self.visits = 0
        for idx in range(loss.node, -1, -1):
            self.visits += 1
            node = self.nodes[idx]
            g = grads.get(idx)
            if g is None or node.kind == "leaf":
                continue
            prim = PRIMITIVES[node.kind]
            in_grads = prim.vjp(g, node.output, node.inputs, **node.attrs)
            for parent, pg in zip(node.parents, in_grads):
                if parent is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
        for idx, node in enumerate(self.nodes):
            if node.kind == "leaf" and idx not in grads:
                grads[idx] = np.zeros_like(node.output)
        return grads

    def grad(self, loss: "Tensor", wrt: Mapping[str, "Tensor"]) -> dict[str, np.ndarray]:
        grads = self.backward(loss)
        return {name: grads[t.node] for name, t in wrt.items()}


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        where = f"node={self.node}" if self.tape is not None else "const"
        return f"Tensor(shape={list(self.shape)}, {where})"

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return record("add", self, other)

    def __radd__(self, other):
        return record("add", other, self)

    def __sub__(self, other):
        return record("sub", self, other)

    def __rsub__(self, other):
        return record("sub", other, self)

    def __mul__(self, other):
        return record("mul", self, other)

    def __rmul__(self, other):
        return record("mul", other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a plain number")
        return record("mul", self, 1.0 / other)

    def __neg__(self):
        return record("neg", self)

    def __matmul__(self, other):
        return record("matmul", self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(kind: str, *inputs, **attrs) -> Tensor:
    """Apply primitive ``kind`` and register the result on the inputs' tape."""
    prim = PRIMITIVES.get(kind)
    if prim is None:
        raise KeyError(f"unknown primitive {kind!r}")
    tensors = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{kind}: inputs are recorded on different tapes")
            tape = t.tape
    arrays = tuple(t.data for t in tensors)
    prim.check(kind, *arrays)
    out = prim.forward(*arrays, **attrs)
    if type(out) is not np.ndarray or out.dtype != np.float64:
        out = np.asarray(out, dtype=np.float64)
    # a sum is finite iff every element is (barring overflow near 1e308)
    if not math.isfinite(out.sum()):
        raise NonFiniteError(f"{kind} produced non-finite values")
    if tape is None:
        return Tensor(out)
    parents = tuple(t.node if t.tape is not None else None for t in tensors)
    tape.nodes.append(_Node(kind, parents, arrays, out, attrs))
    return Tensor(out, tape, len(tape.nodes) - 1)


def matmul(a, b):
    return record("matmul", a, b)


def bias_add(x, b):
    return record("bias_add", x, b)


def sigmoid(x):
    return record("sigmoid", x)


def relu(x):
    return record("relu", x)


def leaky_relu(x, slope: float = 0.01):
    return record("leaky_relu", x, slope=slope)


def prelu(x, a):
    return record("prelu", x, a)


def exp(x):
    return record("exp", x)


def log(x):
    return record("log", x)


def softmax(x):
    return record("softmax", x)


def log_softmax(x):
    return record("log_softmax", x)


def l1(x):
    return record("l1", x)


def sqnorm(x):
    return record("sqnorm", x)


def total(x):
    return record("sum", x)


def mean(x):
    return record("mean", x)


ACTIVATIONS = {
    "sigmoid": sigmoid,
    "relu": relu,
    "leaky-relu": leaky_relu,
    "none": lambda x: x,
}


# --- optimizers -------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new arrays and mutates ``state``.

    Moments are kept as one flat vector over all parameters in ``params`` order.
    """
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"adam: gradient for {name} has shape {list(grads[name].shape)}, "
                             f"parameter has {list(p.shape)}")
    state.step += 1
    t = state.step
    g = np.concatenate([grads[name].ravel() for name in params])
    if state.step == 1 or state.m.get("flat") is None:
        state.m["flat"] = np.zeros_like(g)
        state.v["flat"] = np.zeros_like(g)
    m, v = state.m["flat"], state.v["flat"]
    if m.shape != g.shape:
        raise ShapeError("adam: parameter set changed between steps")
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    g *= g
    v *= state.beta2
    v += (1.0 - state.beta2) * g
    denom = np.sqrt(v)
    denom *= 1.0 / math.sqrt(1.0 - state.beta2**t)
    denom += state.eps
    step = m / denom
    step *= lr / (1.0 - state.beta1**t)
    updated = {}
    offset = 0
    for name, p in params.items():
        updated[name] = p - step[offset:offset + p.size].reshape(p.shape)
        offset += p.size
    return updated


def sgd_step(params, grads, lr: float) -> dict[str, np.ndarray]:
    out = {}
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"sgd: gradient for {name} has shape {list(grads[name].shape)}, "
                             f"parameter has {list(p.shape)}")
        out[name] = p - lr * grads[name]
    return out


# --- finite differences -----------------------------------------------------


def finite_difference(f: Callable[[dict], float], params: Mapping[str, np.ndarray], eps: float = 1e-6):
    """Central-difference gradient of scalar ``f(params)`` for every entry.

    ``f`` receives plain arrays, so it runs without a tape.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name, arr in base.items():
        g = np.empty_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(base))
            flat[i] = orig - eps
            lo = float(f(base))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        out[name] = g
    return out
