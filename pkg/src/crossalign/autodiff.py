"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation on tensors that require gradients records a node holding its
inputs and a local backward rule.  :func:`backward` collects the nodes
reachable from a scalar loss, orders them by creation (which is always a
topological order), propagates gradients and then clears the graph so no
state leaks into the next step.

Broadcasting is deliberately narrow: operands of a binary op must have equal
shapes, or one of them is a vector matching the other's last axis (a vector
added across rows), or a 0-d scalar.  Anything else raises
:class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import itertools
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError, ParameterError

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "build_graph",
    "no_grad",
    "grad_enabled",
    "debug_checks",
    "set_debug",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "relu",
    "clamp",
    "elementwise",
    "sum",
    "mean",
    "reshape",
    "concat",
    "stack",
    "broadcast_rows",
    "max_axis",
    "unfold_time",
    "softmax_temperature",
    "cross_entropy_logits",
    "grad_check",
    "grad_check_tensors",
]

_state = threading.local()
_seq = itertools.count()
_DEBUG_DEFAULT = os.environ.get("CROSSALIGN_DEBUG", "") not in ("", "0")


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _debug() -> bool:
    return getattr(_state, "debug", _DEBUG_DEFAULT)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, frozen passes)."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def set_debug(flag: bool) -> None:
    """Turn NaN/Inf screening at op boundaries on or off for this thread."""
    _state.debug = bool(flag)


@contextlib.contextmanager
def debug_checks(flag: bool = True) -> Iterator[None]:
    prev = _debug()
    _state.debug = flag
    try:
        yield
    finally:
        _state.debug = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    """An n-dimensional float64 array that can carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

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
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis: int | None = None) -> "Tensor":
        return sum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    if _debug() and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    t = Tensor._wrap(out)
    if grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t._node = Node(op, inputs, rule)
    return t


# ---------------------------------------------------------------- binary ops


def _broadcast_kind(op: str, a: Tensor, b: Tensor) -> str:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 2 and sa[-1] == sb[0]:
        return "b_rows"
    if a.ndim == 1 and b.ndim >= 2 and sb[-1] == sa[0]:
        return "a_rows"
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, kind: str, which: str, shape: tuple[int, ...]) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{which}_scalar":
        return np.asarray(g.sum())
    if kind == f"{which}_rows":
        return g.reshape(-1, shape[0]).sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind("add", a, b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _reduce_to(g, kind, "a", sa), _reduce_to(g, kind, "b", sb)

    return _record("add", a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind("sub", a, b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _reduce_to(g, kind, "a", sa), _reduce_to(-g, kind, "b", sb)

    return _record("sub", a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind("mul", a, b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def rule(g):
        ga = _reduce_to(g * bd, kind, "a", sa) if a.requires_grad else None
        gb = _reduce_to(g * ad, kind, "b", sb) if b.requires_grad else None
        return ga, gb

    return _record("mul", ad * bd, (a, b), rule)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product of an m×k and a k×n tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), rule)


# ----------------------------------------------------------------- unary ops


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without the underflow of taking the log of a probability."""
    a = _as_tensor(a)
    x = a.data
    return _record("log_sigmoid", -np.logaddexp(0.0, -x), (a,), lambda g: (g * _sigmoid_np(-x),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _record("log", out, (a,), lambda g: (g / x,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _record("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; the gradient is zero where clipping is active."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {"add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid, "sub": sub,
                "exp": exp, "log": log, "relu": relu, "neg": neg}


def elementwise(op_kind: str, *args) -> Tensor:
    """Dispatch a pointwise op by name (``add``, ``mul``, ``tanh``, ``sigmoid``, ...)."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*args)


# -------------------------------------------------------- shape & reductions


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        return _record("sum", np.asarray(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _record("sum_axis", a.data.sum(axis=ax), (a,), rule)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size
    return _record("mean", np.asarray(a.data.mean()), (a,),
                   lambda g: (np.full(shape, float(g) / n),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def rule(g):
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record("getitem", np.array(out, copy=not basic) if basic else out, (a,), rule)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in ts]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, ts, rule)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("stack of an empty sequence")
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: unequal shapes {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def rule(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _record("stack", out, ts, rule)


def broadcast_rows(v, n: int) -> Tensor:
    """Repeat a length-d vector into an n×d matrix."""
    v = _as_tensor(v)
    if v.ndim != 1:
        raise DimensionError(f"broadcast_rows expects a vector, got {v.shape}")
    return _record("broadcast_rows", np.tile(v.data, (n, 1)), (v,), lambda g: (g.sum(axis=0),))


def max_axis(a, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximiser."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    arg = np.expand_dims(a.data.argmax(axis=ax), ax)
    out = np.take_along_axis(a.data, arg, axis=ax)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        np.put_along_axis(full, arg, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _record("max", np.squeeze(out, axis=ax), (a,), rule)


def unfold_time(x, width: int) -> Tensor:
    """Sliding windows over axis 1: b×T×d → b×(T−width+1)×(width·d)."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"unfold_time expects b×T×d, got {x.shape}")
    b, T, d = x.shape
    if width < 1 or width > T:
        raise ContractError(f"window width {width} does not fit sequence length {T}")
    L = T - width + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, width, axis=1)  # b×L×d×w
    out = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(b, L, width * d)

    def rule(g):
        g = g.reshape(b, L, width, d)
        full = np.zeros((b, T, d))
        for k in range(width):
            full[:, k:k + L, :] += g[:, :, k, :]
        return (full,)

    return _record("unfold_time", out, (x,), rule)


# ------------------------------------------------------- softmax and losses


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_temperature(v, gamma: float) -> Tensor:
    """softmax(v / gamma) along the last axis."""
    if not gamma > 0:
        raise ParameterError(f"temperature must be positive, got {gamma}")
    v = _as_tensor(v)
    if _debug() and not np.all(np.isfinite(v.data)):
        raise NonFiniteError("softmax_temperature received non-finite logits")
    s = _softmax_np(v.data / gamma)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)) / gamma,)

    return _record("softmax_temperature", s, (v,), rule)


def cross_entropy_logits(logits, targets, pad_mask=None) -> Tensor:
    """Mean token cross-entropy of n×V logits against integer targets.

    ``pad_mask[i]`` true marks position i as padding; those positions are
    excluded from the mean.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_logits expects n×V logits, got {logits.shape}")
    n, V = logits.shape
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {tgt.shape[0]} targets")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= V):
        raise IndexError(f"target id out of range for vocabulary of size {V}")
    keep = np.ones(n, dtype=bool) if pad_mask is None else ~np.asarray(pad_mask, dtype=bool).reshape(-1)
    count = int(keep.sum())
    if count == 0:
        raise ContractError("cross_entropy_logits: every position is masked")
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, tgt]
    loss = float((nll * keep).sum() / count)

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[rows, tgt] -= 1.0
        p *= (keep / count)[:, None] * float(g)
        return (p,)

    return _record("cross_entropy", np.asarray(loss), (logits,), rule)


# ------------------------------------------------------------------ backward


class Graph:
    """Recorded operations reachable from a loss, in topological order."""

    def __init__(self, nodes: list[tuple[Tensor, Node]]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for _, n in self.nodes]

    def clear(self) -> None:
        for out, _ in self.nodes:
            out._node = None
        self.nodes = []


def build_graph(loss: Tensor) -> Graph:
    """Collect every node reachable from ``loss`` ordered inputs-first."""
    found: dict[int, tuple[Tensor, Node]] = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        node = t._node
        if node is None or id(t) in found:
            continue
        found[id(t)] = (t, node)
        stack_.extend(node.inputs)
    ordered = sorted(found.values(), key=lambda item: item[1].seq)
    return Graph(ordered)


def backward(loss: Tensor) -> None:
    """Write ∂loss/∂t into ``t.grad`` for every tensor that requires grad.

    Leaf gradients accumulate across calls (call ``zero_grad`` between
    steps); intermediate gradients are overwritten.  The graph is cleared.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None and not loss.requires_grad:
        raise ContractError("backward called on a tensor with no recorded graph")
    graph = build_graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    if loss._node is None:
        leaves[id(loss)] = loss
    for out, node in reversed(graph.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        in_grads = node.rule(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if inp._node is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    graph.clear()


# ---------------------------------------------------------------- grad check


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic − central difference| / max(1, |analytic|)."""
    base = np.array(_as_tensor(x).data, dtype=np.float64)
    xt = Tensor(base, requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            probe = base.copy().reshape(-1)
            probe[i] += h
            fp = f(Tensor(probe.reshape(base.shape))).item()
            probe[i] -= 2 * h
            fm = f(Tensor(probe.reshape(base.shape))).item()
            flat[i] = (fp - fm) / (2 * h)
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check_tensors(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Like :func:`grad_check` but perturbs tensors in place (model weights).

    ``max_coords`` limits the number of probed coordinates per tensor,
    chosen with ``rng``.
    """
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(1.0, abs(a)))
        t.grad = None
    return float(worst)
