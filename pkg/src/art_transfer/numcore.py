"""Dense float64 arrays with reverse-mode differentiation and first-order optimizers.

Every operation takes :class:`Node` operands, computes its value eagerly with
numpy and records a closure that pushes the output gradient back to its
inputs. Leading axes broadcast like numpy, so the same functions serve single
vectors of shape ``(d,)`` and mini-batches of shape ``(B, d)``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation, DimensionError

DTYPE = np.float64
SCORE_CLAMP = 80.0


class Node:
    """A value in the computation graph.

    ``grad`` is ``None`` until something flows into it; parameters created by
    :class:`ParamStore` start with a zero gradient of the value's shape.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, value, parents: tuple = (), backward_fn=None, op: str = "",
                 requires_grad: bool | None = None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op or 'leaf'}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=DTYPE), requires_grad=False)


def constant(x) -> Node:
    return Node(np.array(x, dtype=DTYPE), requires_grad=False)


def variable(x) -> Node:
    v = np.array(x, dtype=DTYPE)
    n = Node(v, requires_grad=True)
    n.grad = np.zeros_like(v)
    return n


def _accum(node: Node, g) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=DTYPE)
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(value, parents, backward_fn, op) -> Node:
    req = any(p.requires_grad for p in parents)
    return Node(value, parents, backward_fn if req else None, op, req)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        out = a.value - b.value
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.value, b.shape))
    return _make(out, (a, b), bw, "mul")


def one_minus(x) -> Node:
    """``1 - x`` elementwise."""
    x = as_node(x)

    def bw(g):
        _accum(x, -g)
    return _make(1.0 - x.value, (x,), bw, "one_minus")


def scale(x, c: float) -> Node:
    x = as_node(x)

    def bw(g):
        _accum(x, g * c)
    return _make(x.value * c, (x,), bw, "scale")


def tanh(x) -> Node:
    x = as_node(x)
    out = np.tanh(x.value)

    def bw(g):
        _accum(x, g * (1.0 - out * out))
    return _make(out, (x,), bw, "tanh")


def sigmoid(x) -> Node:
    x = as_node(x)
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        _accum(x, g * out * (1.0 - out))
    return _make(out, (x,), bw, "sigmoid")


def exp(x) -> Node:
    x = as_node(x)
    out = np.exp(x.value)

    def bw(g):
        _accum(x, g * out)
    return _make(out, (x,), bw, "exp")


def log(x) -> Node:
    x = as_node(x)

    def bw(g):
        _accum(x, g / x.value)
    return _make(np.log(x.value), (x,), bw, "log")


def clip(x, lo: float, hi: float) -> Node:
    """Clamp values; gradient passes only where the input was inside the range."""
    x = as_node(x)
    inside = (x.value >= lo) & (x.value <= hi)

    def bw(g):
        _accum(x, g * inside)
    return _make(np.clip(x.value, lo, hi), (x,), bw, "clip")


def where(cond: np.ndarray, a, b) -> Node:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant mask."""
    a, b = as_node(a), as_node(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.value, b.value)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.where(cond, 0.0, g), b.shape))
    return _make(out, (a, b), bw, "where")


def grad_scale(x, factor: float) -> Node:
    """Identity forward; multiplies the gradient by ``factor`` on the way back."""
    x = as_node(x)

    def bw(g):
        _accum(x, g * factor)
    return _make(x.value, (x,), bw, "grad_scale")


# ------------------------------------------------------------------ linear maps

def linear(x, W) -> Node:
    """``x @ W.T`` over the last axis of ``x``; ``W`` is ``(d_out, d_in)``."""
    x, W = as_node(x), as_node(W)
    if W.value.ndim != 2 or x.value.shape[-1] != W.value.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    out = x.value @ W.value.T

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ W.value)
        if W.requires_grad:
            _accum(W, g.reshape(-1, g.shape[-1]).T @ x.value.reshape(-1, x.value.shape[-1]))
    return _make(out, (x, W), bw, "linear")


def affine(x, W, b) -> Node:
    """``W·x + b`` applied over the last axis of ``x``."""
    x, W, b = as_node(x), as_node(W), as_node(b)
    if W.value.ndim != 2 or x.value.shape[-1] != W.value.shape[1]:
        raise DimensionError(f"affine: x {x.shape} does not match W {W.shape}")
    if b.value.shape != (W.value.shape[0],):
        raise DimensionError(f"affine: b {b.shape} does not match W {W.shape}")
    out = x.value @ W.value.T + b.value

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ W.value)
        if W.requires_grad:
            _accum(W, g.reshape(-1, g.shape[-1]).T @ x.value.reshape(-1, x.value.shape[-1]))
        if b.requires_grad:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
    return _make(out, (x, W, b), bw, "affine")


def dot(x, v) -> Node:
    """Inner product of the last axis of ``x`` with vector ``v``."""
    x, v = as_node(x), as_node(v)
    if v.value.ndim != 1 or x.value.shape[-1] != v.value.shape[0]:
        raise DimensionError(f"dot: x {x.shape} does not match v {v.shape}")
    out = x.value @ v.value

    def bw(g):
        if x.requires_grad:
            _accum(x, g[..., None] * v.value)
        if v.requires_grad:
            _accum(v, (g[..., None] * x.value).reshape(-1, v.value.shape[0]).sum(axis=0))
    return _make(out, (x, v), bw, "dot")


def weighted_sum(weights, states) -> Node:
    """Sum of ``states[..., j, :]`` weighted by ``weights[..., j]``."""
    w, s = as_node(weights), as_node(states)
    if s.value.shape[:-1] != w.value.shape:
        raise DimensionError(f"weighted_sum: weights {w.shape} vs states {s.shape}")
    out = np.einsum("...j,...jd->...d", w.value, s.value)

    def bw(g):
        if w.requires_grad:
            _accum(w, np.einsum("...d,...jd->...j", g, s.value))
        if s.requires_grad:
            _accum(s, w.value[..., None] * g[..., None, :])
    return _make(out, (w, s), bw, "weighted_sum")


def lstm_cell(pre, c_prev) -> Node:
    """LSTM state update from pre-activations ordered ``[c~; o; i; f]``.

    Returns a node holding ``concat(h, c)`` on the last axis, where
    ``c = tanh(c~)*sigmoid(i) + c_prev*sigmoid(f)`` and ``h = sigmoid(o)*tanh(c)``.
    """
    pre, c_prev = as_node(pre), as_node(c_prev)
    d = c_prev.value.shape[-1]
    if pre.value.shape[-1] != 4 * d:
        raise DimensionError(f"lstm_cell: pre-activation {pre.shape} vs state {c_prev.shape}")
    z = pre.value
    cand = np.tanh(z[..., :d])
    gates = sigmoid(constant(z[..., d:])).value
    o, i, f = gates[..., :d], gates[..., d:2 * d], gates[..., 2 * d:]
    c = cand * i + c_prev.value * f
    tc = np.tanh(c)
    h = o * tc
    out = np.concatenate([h, np.broadcast_to(c, h.shape)], axis=-1)

    def bw(g):
        gh, gc = g[..., :d], g[..., d:]
        gc = gc + gh * o * (1.0 - tc * tc)
        if pre.requires_grad:
            gz = np.concatenate([
                gc * i * (1.0 - cand * cand),
                gh * tc * o * (1.0 - o),
                gc * cand * i * (1.0 - i),
                gc * c_prev.value * f * (1.0 - f),
            ], axis=-1)
            _accum(pre, _unbroadcast(gz, pre.shape))
        if c_prev.requires_grad:
            _accum(c_prev, _unbroadcast(gc * f, c_prev.shape))
    return _make(out, (pre, c_prev), bw, "lstm_cell")


# ---------------------------------------------------------------- normalizers

def softmax(x, mask: np.ndarray | None = None) -> Node:
    """Softmax over the last axis; masked-out entries get exactly zero weight."""
    x = as_node(x)
    v = x.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        v = np.where(mask, v, -np.inf)
    m = np.max(v, axis=-1, keepdims=True)
    e = np.exp(v - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))
    return _make(out, (x,), bw, "softmax")


def logsumexp(x, axis: int = -1) -> Node:
    x = as_node(x)
    v = x.value
    m = np.max(v, axis=axis, keepdims=True)
    s = np.exp(v - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = (np.log(tot) + m).squeeze(axis)
    p = s / tot

    def bw(g):
        _accum(x, np.expand_dims(g, axis) * p)
    return _make(out, (x,), bw, "logsumexp")


def log_softmax(x) -> Node:
    x = as_node(x)
    v = x.value
    m = np.max(v, axis=-1, keepdims=True)
    lse = np.log(np.exp(v - m).sum(axis=-1, keepdims=True)) + m
    out = v - lse
    p = np.exp(out)

    def bw(g):
        _accum(x, g - p * g.sum(axis=-1, keepdims=True))
    return _make(out, (x,), bw, "log_softmax")


# ------------------------------------------------------------------- structure

def getitem(x, idx) -> Node:
    x = as_node(x)
    out = x.value[idx]

    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(x.value)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accum(x, full)
    return _make(np.array(out, dtype=DTYPE), (x,), bw, "getitem")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None
               for p in parts)


def take_rows(table, ids) -> Node:
    """Rows of ``table`` selected by the integer array ``ids`` (embedding lookup)."""
    table = as_node(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.value[ids]

    def bw(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.value.shape[1]))
        _accum(table, full)
    return _make(out, (table,), bw, "take_rows")


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            "concat: shapes " + ", ".join(str(n.shape) for n in nodes) + " do not conform"
        ) from exc
    sizes = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]

    def bw(g):
        for n, part in zip(nodes, np.split(g, sizes, axis=axis)):
            _accum(n, part)
    return _make(out, tuple(nodes), bw, "concat")


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.stack([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            "stack: shapes " + ", ".join(str(n.shape) for n in nodes) + " differ"
        ) from exc

    def bw(g):
        for k, n in enumerate(nodes):
            _accum(n, np.take(g, k, axis=axis))
    return _make(out, tuple(nodes), bw, "stack")


def reshape(x, shape: tuple) -> Node:
    x = as_node(x)

    def bw(g):
        _accum(x, g.reshape(x.value.shape))
    return _make(x.value.reshape(shape), (x,), bw, "reshape")


def expand_dims(x, axis: int) -> Node:
    x = as_node(x)

    def bw(g):
        _accum(x, g.reshape(x.value.shape))
    return _make(np.expand_dims(x.value, axis), (x,), bw, "expand_dims")


def sum(x, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    x = as_node(x)
    out = np.asarray(x.value.sum(axis=axis), dtype=DTYPE)

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.value.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.value.shape))
    return _make(out, (x,), bw, "sum")


def mean(x) -> Node:
    x = as_node(x)
    n = x.value.size

    def bw(g):
        _accum(x, np.broadcast_to(g / n, x.value.shape))
    return _make(np.asarray(x.value.mean(), dtype=DTYPE), (x,), bw, "mean")


def max_over(x, axis: int = -2, mask: np.ndarray | None = None) -> Node:
    """Max along ``axis``; gradient goes to the (first) argmax only.

    ``mask`` has the shape of ``x`` without the trailing feature axis and marks
    valid positions along ``axis``.
    """
    x = as_node(x)
    v = x.value
    if mask is not None:
        m = np.expand_dims(np.asarray(mask, dtype=bool), -1)
        v = np.where(m, v, -np.inf)
    arg = np.argmax(v, axis=axis)
    out = np.take_along_axis(x.value, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(x.value)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accum(x, full)
    return _make(out, (x,), bw, "max_over")


def dropout(x, p: float, training: bool, rng: np.random.Generator | None) -> Node:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` so eval mode is identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    x = as_node(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.value.shape) >= p) / (1.0 - p)

    def bw(g):
        _accum(x, g * keep)
    return _make(x.value * keep, (x,), bw, "dropout")


# -------------------------------------------------------------------- backward

def _topo_order(root: Node) -> list[Node]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``grad`` on every ancestor of the scalar ``loss``."""
    if loss.value.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    _accum(loss, np.ones_like(loss.value))
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ----------------------------------------------------------------- grad checks

def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(fn: Callable[..., Node], inputs: Sequence, eps: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences.

    ``fn`` maps Nodes built from ``inputs`` (arrays) to a scalar Node. Every
    coordinate of every input is perturbed.
    """
    arrays = [np.array(x, dtype=DTYPE) for x in inputs]
    nodes = [variable(a) for a in arrays]
    backward(fn(*nodes))
    worst = 0.0
    for k, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for j in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                probe = [a.copy() for a in arrays]
                probe[k].reshape(-1)[j] += sign * eps
                vals.append(float(fn(*[constant(a) for a in probe]).value))
            flat[j] = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, relative_error(nodes[k].grad, numeric))
    return worst


class ParamStore:
    """Named trainable parameters, iterated in sorted-name order."""

    def __init__(self):
        self._params: dict[str, Node] = {}
        self.slots: dict[str, dict[str, np.ndarray]] = {}
        self.step_counts: dict[str, int] = {}

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        node = variable(value)
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self._params if n.startswith(prefix))

    def items(self, prefix: str = ""):
        return [(n, self._params[n]) for n in self.names(prefix)]

    def num_values(self) -> int:
        return int(np.sum([p.value.size for p in self._params.values()]))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.value)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    def load(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, v in values.items():
            if name not in self._params:
                if strict:
                    raise ContractViolation(f"unknown parameter {name!r}")
                continue
            p = self._params[name]
            v = np.asarray(v, dtype=DTYPE)
            if v.shape != p.value.shape:
                raise DimensionError(f"{name}: shape {v.shape} != {p.value.shape}")
            p.value[...] = v

    def reset_optimizer(self) -> None:
        self.slots.clear()
        self.step_counts.clear()


def glorot_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (1, shape[0])
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


OPTIMIZER_DEFAULTS = {
    "sgd": {},
    "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "adagrad": {"eps": 1e-10, "initial_accumulator": 0.0},
}


def optimizer_step(store: ParamStore, kind: str, lr: float,
                   names: Iterable[str] | None = None, clip_norm: float | None = None,
                   **hyper) -> None:
    """Update parameters in place from their gradients, then zero the gradients.

    ``names`` restricts the update to a subset; gradients of the others are
    zeroed too so nothing carries over into the next step.
    """
    if kind not in OPTIMIZER_DEFAULTS:
        raise ConfigError(f"unknown optimizer {kind!r}")
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    h = {**OPTIMIZER_DEFAULTS[kind], **hyper}
    selected = store.names() if names is None else sorted(names)

    if clip_norm is not None:
        total = math.sqrt(math.fsum(float(np.sum(store[n].grad ** 2)) for n in selected))
        factor = clip_norm / total if total > clip_norm else 1.0
    else:
        factor = 1.0

    for name in selected:
        p = store[name]
        g = p.grad * factor if factor != 1.0 else p.grad
        if kind == "sgd":
            p.value -= lr * g
        elif kind == "adam":
            slot = store.slots.setdefault(
                name, {"m": np.zeros_like(p.value), "v": np.zeros_like(p.value)})
            t = store.step_counts.get(name, 0) + 1
            store.step_counts[name] = t
            slot["m"] = h["beta1"] * slot["m"] + (1 - h["beta1"]) * g
            slot["v"] = h["beta2"] * slot["v"] + (1 - h["beta2"]) * g * g
            m_hat = slot["m"] / (1 - h["beta1"] ** t)
            v_hat = slot["v"] / (1 - h["beta2"] ** t)
            p.value -= lr * m_hat / (np.sqrt(v_hat) + h["eps"])
        else:
            slot = store.slots.setdefault(
                name, {"acc": np.full_like(p.value, h["initial_accumulator"])})
            slot["acc"] += g * g
            p.value -= lr * g / (np.sqrt(slot["acc"]) + h["eps"])
    store.zero_grad()
