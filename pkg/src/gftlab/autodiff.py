"""Reverse-mode autodiff over float64 numpy arrays.

A :class:`Node` wraps one array.  Operations build a tape of parent links
while gradient recording is enabled; :func:`backward` walks it once in reverse
topological order and then releases it, so each forward supports a single
backward.
"""

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class GradientError(RuntimeError):
    """Raised on misuse of the tape (non-scalar root, consumed graph)."""


_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)
_sg_replay: ContextVar["_FrozenBranches | None"] = ContextVar("sg_replay", default=None)
_counters: ContextVar["CostCounters | None"] = ContextVar("counters", default=None)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def no_grad():
    """Evaluation mode: operations inside record no tape."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op", "_consumed")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, op=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def parameter(value) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True, op="param")


def constant(value) -> Node:
    return Node(value, op="const")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, backward_fn, op):
    parents = tuple(parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, parents, backward_fn, requires_grad=True, op=op)
    return Node(value, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), bw, "mul")


def square(a) -> Node:
    a = as_node(a)
    return _make(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,), "square")


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Node:
    a = as_node(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def silu(a) -> Node:
    a = as_node(a)
    sig = expit(a.value)
    out = a.value * sig

    def bw(g):
        return (g * (sig + out * (1.0 - sig)),)

    return _make(out, (a,), bw, "silu")


def softplus(a) -> Node:
    """log(1 + e^a), stable for large |a|."""
    a = as_node(a)
    v = a.value
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    sig = expit(v)
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def log_sigmoid(a) -> Node:
    return mul(softplus(mul(a, -1.0)), -1.0)


# -- linear algebra and shape ------------------------------------------------


def matmul(a, w) -> Node:
    """``a @ w`` with ``a`` of rank >= 1 and ``w`` a matrix."""
    a, w = as_node(a), as_node(w)
    out = a.value @ w.value

    def bw(g):
        ga = g @ w.value.T
        a2 = a.value.reshape(-1, a.value.shape[-1])
        gw = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gw

    return _make(out, (a, w), bw, "matmul")


def sum_(a, axis=None) -> Node:
    a = as_node(a)
    out = a.value.sum(axis=axis)

    def bw(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a, shape) -> Node:
    a = as_node(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(nodes, axis=-1) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, nodes, bw, "concat")


def take_rows(table, idx) -> Node:
    """``table[idx]`` for an integer index array of any shape."""
    table = as_node(table)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(table.value[idx], (table,), bw, "take_rows")


def pick_last(a, idx) -> Node:
    """Select ``a[..., idx[...]]`` along the last axis."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take_along_axis(a.value, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        ga = np.zeros_like(a.value)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return _make(out, (a,), bw, "pick_last")


def log_softmax(a) -> Node:
    a = as_node(a)
    m = a.value.max(axis=-1, keepdims=True)
    z = a.value - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


# -- stop-gradient -------------------------------------------------------------


@dataclass
class _FrozenBranches:
    values: list = field(default_factory=list)
    recording: bool = True
    cursor: int = 0


@contextlib.contextmanager
def frozen_branches(state: _FrozenBranches):
    token = _sg_replay.set(state)
    try:
        yield state
    finally:
        _sg_replay.reset(token)


def stop_gradient(x) -> Node:
    """Pass the value through; deposit no gradient into ``x``'s parents.

    Inside :func:`frozen_branches` the first pass records every stopped
    value and later passes replay them in call order, which is how the
    finite-difference check keeps stopped branches frozen.
    """
    x = as_node(x)
    value = x.value
    replay = _sg_replay.get()
    if replay is not None:
        if replay.recording:
            replay.values.append(value.copy())
        else:
            value = replay.values[replay.cursor]
            replay.cursor += 1
    return Node(value, op="stop_gradient")


# -- backward ------------------------------------------------------------------


def _topo(root: Node) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> dict:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a map from ``id(leaf)`` to its gradient array.
    """
    if root.value.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise GradientError("graph already consumed; re-run the forward pass")
    counters = _counters.get()
    if counters is not None:
        counters.backwards += 1
    if not root.requires_grad:
        root._consumed = True
        return {}
    order = _topo(root)
    grads = {id(root): np.ones_like(root.value)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[id(node)] = node.grad
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node.parents = ()
        node.backward_fn = None
        node._consumed = True
    root._consumed = True
    return leaves


# -- cost accounting -------------------------------------------------------------


@dataclass
class CostCounters:
    recorded_forwards: int = 0
    free_forwards: int = 0
    backwards: int = 0

    @property
    def forwards(self) -> int:
        return self.recorded_forwards + self.free_forwards

    def as_dict(self) -> dict:
        return {
            "recorded_forwards": self.recorded_forwards,
            "free_forwards": self.free_forwards,
            "forwards": self.forwards,
            "backwards": self.backwards,
        }


@contextlib.contextmanager
def counting():
    counters = CostCounters()
    token = _counters.set(counters)
    try:
        yield counters
    finally:
        _counters.reset(token)


def record_forward():
    """Called once per network evaluation."""
    counters = _counters.get()
    if counters is None:
        return
    if is_grad_enabled():
        counters.recorded_forwards += 1
    else:
        counters.free_forwards += 1


# -- optimizers ------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads=None, lr=None):
        """One bias-corrected update, in place.  ``grads`` defaults to ``.grad``."""
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.value.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.value.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Ema:
    def __init__(self, params: dict, decay=0.9999):
        if not 0.0 <= decay < 1.0:
            raise ValueError("EMA decay must lie in [0, 1)")
        self.decay = decay
        self.shadow = {k: p.value.copy() for k, p in params.items()}

    def update(self, params: dict):
        d = self.decay
        for k, p in params.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * p.value


# -- gradient check ----------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    per_param: dict
    passed: bool


def finite_diff_check(f, params: dict, h=1e-5, tol=1e-6) -> GradCheckReport:
    """Compare autodiff gradients of ``f()`` against central differences.

    ``f`` takes no arguments and builds a scalar Node from ``params``.  The
    relative error of a tensor is ``|g_ad - g_fd|_2 / max(|g_ad|_2, |g_fd|_2)``
    (zero when both vanish).  Stopped branches are frozen at their values
    from the unperturbed evaluation.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    for p in params.values():
        p.grad = None
    frozen = _FrozenBranches()
    with frozen_branches(frozen):
        root = f()
    backward(root)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.value)) for k, p in params.items()}
    frozen.recording = False

    def evaluate():
        frozen.cursor = 0
        with no_grad(), frozen_branches(frozen):
            return float(f().value)

    per_param, worst_rel, worst_abs = {}, 0.0, 0.0
    for name, p in params.items():
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        out = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
        diff = np.linalg.norm(analytic[name] - numeric)
        scale = max(np.linalg.norm(analytic[name]), np.linalg.norm(numeric))
        rel = 0.0 if scale == 0.0 else diff / scale
        per_param[name] = rel
        worst_rel = max(worst_rel, rel)
        worst_abs = max(worst_abs, float(np.max(np.abs(analytic[name] - numeric), initial=0.0)))
    return GradCheckReport(worst_rel, worst_abs, per_param, worst_rel < tol)
