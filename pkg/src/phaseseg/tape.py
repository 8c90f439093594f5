"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records :class:`Node` objects in creation order. Each recorded
primitive stores a closure mapping the upstream gradient to gradients for its
inputs; :meth:`Tape.backward` replays the list in reverse.

    tape = Tape()
    x = tape.leaf(np.array([3.0]))
    y = (x * x).sum()
    tape.backward(y)
    x.grad  # array([6.])
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("tape", "value", "grad", "parents", "vjp", "kind", "requires_grad", "name")

    def __init__(self, tape, value, parents=(), vjp=None, kind="leaf", requires_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.vjp = vjp
        self.kind = kind
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.kind}, shape={self.value.shape})"

    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return self.tape.record("add", self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.record("subtract", self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.record("subtract", self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.record("scale", self, factor=float(other))
        return self.tape.record("multiply", self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return self.tape.record("scale", self, factor=1.0 / float(other))
        return self.tape.record("divide", self, self._lift(other))

    def __neg__(self):
        return self.tape.record("scale", self, factor=-1.0)

    def __matmul__(self, other):
        return self.tape.record("matmul", self, self._lift(other))

    def __getitem__(self, index):
        return self.tape.record("slice", self, index=index)

    def sum(self, axis=None, keepdims=False):
        return self.tape.record("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.tape.record("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.record("reshape", self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return self.tape.record("transpose", self, axes=axes or None)

    @property
    def T(self):
        return self.transpose()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"shapes {shapes} do not broadcast") from exc


# Each primitive returns (value, vjp) where vjp maps the output gradient to a
# tuple of input gradients (None for inputs that need no gradient).


def _p_add(a, b):
    _broadcast_shape(a.shape, b.shape)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _p_subtract(a, b):
    _broadcast_shape(a.shape, b.shape)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _p_multiply(a, b):
    _broadcast_shape(a.shape, b.shape)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _p_divide(a, b):
    _broadcast_shape(a.shape, b.shape)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _p_scale(a, factor):
    return a * factor, lambda g: (g * factor,)


def _p_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes so the weight gradient is one GEMM, not a broadcast-and-sum
        a2 = a.reshape(-1, a.shape[-1])
        out = (a2 @ b).reshape(a.shape[:-1] + (b.shape[1],))

        def vjp2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.T).reshape(a.shape), a2.T @ g2

        return out, vjp2
    out = a @ b

    def vjp(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


def _p_transpose(a, axes=None):
    out = np.transpose(a, axes)
    inverse = None if axes is None else np.argsort(axes)
    return out, lambda g: (np.transpose(g, inverse),)


def _p_reshape(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return out, lambda g: (g.reshape(a.shape),)


def _p_concat(*arrays, axis=0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return out, vjp


def _p_slice(a, index):
    out = a[index]

    def vjp(g):
        full = np.zeros_like(a)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return out, vjp


def _is_fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _p_relu(a):
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


def _p_sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a))
    return out, lambda g: (g * out * (1.0 - out),)


def _p_tanh(a):
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),)


def _p_softmax(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return out, vjp


def _p_layer_norm(a, eps=1e-5):
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return xhat, vjp


def _p_sum(a, axis=None, keepdims=False):
    out = np.sum(a, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return np.asarray(out), vjp


def _p_mean(a, axis=None, keepdims=False):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1) if axis is not None else a.size

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return np.asarray(out), vjp


def _p_log(a, floor=0.0):
    clipped = np.maximum(a, floor) if floor > 0 else a
    out = np.log(clipped)
    mask = a >= floor if floor > 0 else np.ones(a.shape, dtype=bool)
    return out, lambda g: (np.where(mask, g / clipped, 0.0),)


def _p_exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _p_sqrt(a):
    out = np.sqrt(a)
    return out, lambda g: (g * 0.5 / out,)


PRIMITIVES: dict[str, Callable] = {
    "add": _p_add,
    "subtract": _p_subtract,
    "multiply": _p_multiply,
    "divide": _p_divide,
    "scale": _p_scale,
    "matmul": _p_matmul,
    "transpose": _p_transpose,
    "reshape": _p_reshape,
    "concat": _p_concat,
    "slice": _p_slice,
    "relu": _p_relu,
    "sigmoid": _p_sigmoid,
    "tanh": _p_tanh,
    "softmax": _p_softmax,
    "layer_norm": _p_layer_norm,
    "sum": _p_sum,
    "mean": _p_mean,
    "log": _p_log,
    "exp": _p_exp,
    "sqrt": _p_sqrt,
}


class Tape:
    """Ordered record of nodes; nodes are appended in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name=None, requires_grad=True) -> Node:
        node = Node(self, np.asarray(value, dtype=np.float64), requires_grad=requires_grad, name=name)
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def record(self, kind: str, *inputs: Node, **attrs) -> Node:
        try:
            fn = PRIMITIVES[kind]
        except KeyError:
            raise ValueError(f"unknown primitive {kind!r}") from None
        value, vjp = fn(*(n.value for n in inputs), **attrs)
        needs = any(n.requires_grad for n in inputs)
        node = Node(self, value, parents=inputs, vjp=vjp if needs else None, kind=kind, requires_grad=needs)
        self.nodes.append(node)
        return node

    def backward(self, root: Node) -> None:
        if root.value.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            for parent, g in zip(node.parents, node.vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in self.nodes:
            if node.requires_grad and node.vjp is None and node.grad is None:
                node.grad = np.zeros_like(node.value)


# Functional spellings for primitives without an operator.
def concat(nodes: Sequence[Node], axis=0) -> Node:
    return nodes[0].tape.record("concat", *nodes, axis=axis)


def relu(x):
    return x.tape.record("relu", x)


def sigmoid(x):
    return x.tape.record("sigmoid", x)


def tanh(x):
    return x.tape.record("tanh", x)


def softmax(x):
    return x.tape.record("softmax", x)


def layer_norm(x, eps=1e-5):
    return x.tape.record("layer_norm", x, eps=eps)


def log(x, floor=0.0):
    return x.tape.record("log", x, floor=floor)


def exp(x):
    return x.tape.record("exp", x)


def sqrt(x):
    return x.tape.record("sqrt", x)


def grad_check(f: Callable[[Tape, dict], Node], params: dict[str, np.ndarray], step: float = 1e-5) -> float:
    """Max relative error of tape gradients against central differences.

    ``f(tape, leaves)`` must build a scalar node from the leaf nodes. The
    error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate():
        tape = Tape()
        leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
        root = f(tape, leaves)
        return tape, leaves, root

    tape, leaves, root = evaluate()
    tape.backward(root)
    analytic = {k: n.grad.copy() for k, n in leaves.items()}

    worst = 0.0
    for name, base in params.items():
        flat = base.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = float(evaluate()[2].value)
            flat[i] = old - step
            fm = float(evaluate()[2].value)
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective perturbing {name}[{i}]")
            numeric = (fp - fm) / (2 * step)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with decoupled weight decay. Returns new (params, state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {params[name].shape} for {name}")
    t = state.step + 1
    m, v, out = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m[name] = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v[name] = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        mhat = m[name] / (1 - beta1 ** t)
        vhat = v[name] / (1 - beta2 ** t)
        decayed = p - lr * weight_decay * p
        out[name] = decayed - lr * mhat / (np.sqrt(vhat) + eps)
    return out, AdamState(step=t, m=m, v=v)


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None,
                    state: AdamState | None = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {k: _pack(v) for k, v in sorted(params.items())},
    }
    if state is not None:
        doc["adam"] = {
            "step": state.step,
            "m": {k: _pack(v) for k, v in sorted(state.m.items())},
            "v": {k: _pack(v) for k, v in sorted(state.v.items())},
        }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Returns (params, meta, adam_state_or_None)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    params = {k: _unpack(v) for k, v in doc["params"].items()}
    state = None
    if "adam" in doc:
        a = doc["adam"]
        state = AdamState(step=a["step"], m={k: _unpack(v) for k, v in a["m"].items()},
                          v={k: _unpack(v) for k, v in a["v"].items()})
    return params, doc.get("meta", {}), state


def _pack(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}


def _unpack(entry):
    return np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
