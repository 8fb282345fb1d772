"""Dense tensors with a reverse-mode differentiation graph.

A :class:`Tensor` wraps a numpy array. Every differentiable operation that
touches a tensor with ``requires_grad`` records a :class:`Node` holding the
operation name, its inputs and a closure mapping the output gradient to the
input gradients. :func:`backward` walks the recorded graph in reverse
topological order and accumulates gradients by summation.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidShape, NonDeterministic, NonScalarLoss

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.op}, inputs={len(self.inputs)})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        op = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{op})"


def tensor_new(shape: Sequence[int], fill=0.0, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    """Create a tensor of ``shape`` from a scalar fill or a flat row-major array."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise InvalidShape(f"extents must be >= 1, got {shape}")
    n = int(np.prod(shape, dtype=np.int64))
    if np.isscalar(fill):
        data = np.full(shape, fill, dtype=dtype)
    else:
        flat = np.asarray(fill, dtype=dtype).reshape(-1)
        if flat.size != n:
            raise InvalidShape(f"fill has {flat.size} elements, shape {shape} needs {n}")
        data = flat.reshape(shape).copy()
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    The node is only attached when some input requires a gradient and
    recording is enabled.
    """
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise InvalidShape(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if kind == "relu":
        if b is not None:
            raise InvalidShape("relu is unary")
        return relu(a)
    if b is None:
        raise InvalidShape(f"{kind} needs two operands")
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant that is not part of the graph."""
    c = a.dtype.type(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return record("sum", np.asarray(a.data.sum(), dtype=dtype), (a,),
                  lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.inputs:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor t."""
    if loss.size != 1:
        raise NonScalarLoss(f"loss must hold one element, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
        node = t.node
        if node is None:
            continue
        for p, pg in zip(node.inputs, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            pending[k] = pg if k not in pending else pending[k] + pg
        if not retain_graph:
            t.node = None


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    worst_index: int

    def __str__(self) -> str:
        return f"{self.op_name:<28s} max_rel_error={self.max_rel_error:.3e} worst_index={self.worst_index}"


def grad_check(forward_fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               op_name: str = "", max_coords: Optional[int] = None, seed: int = 0) -> GradReport:
    """Compare graph gradients of ``forward_fn(*inputs)`` with central differences.

    Only inputs with ``requires_grad`` are perturbed. ``max_coords`` limits
    the number of coordinates probed per input (sampled without replacement
    from ``seed``); ``worst_index`` is a flat index into the concatenation of
    the probed inputs.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    targets = [t for t in inputs if t.requires_grad]
    for t in targets:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    out = forward_fn(*inputs)
    base = float(out.data.reshape(-1)[0])
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]
    with no_grad():
        again = float(forward_fn(*inputs).data.reshape(-1)[0])
    if again != base:
        raise NonDeterministic(f"{op_name}: baseline evaluations differ ({base!r} vs {again!r})")

    rng = np.random.default_rng(seed)
    worst, worst_idx, offset = 0.0, 0, 0
    with no_grad():
        for t, ga in zip(targets, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(forward_fn(*inputs).data.reshape(-1)[0])
                flat[i] = orig - eps
                fm = float(forward_fn(*inputs).data.reshape(-1)[0])
                flat[i] = orig
                numeric = (fp - fm) / (2 * eps)
                a = float(gflat[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if rel > worst:
                    worst, worst_idx = rel, offset + int(i)
            offset += flat.size
    return GradReport(op_name, worst, worst_idx)
