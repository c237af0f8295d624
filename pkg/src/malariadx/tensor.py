"""Immutable tensors and the tape that records their computation graph.

A :class:`Tensor` is a read-only wrapper around a numpy array.  Tensors that
take part in differentiation belong to a :class:`Tape`; every primitive
applied to them appends a :class:`Node` so that :func:`backward` can walk the
graph in reverse.  Primitive implementations live in :mod:`malariadx.ops`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import NonFiniteError, RejectedInputError

MAX_RANK = 4

ForwardFn = Callable[..., Tuple[np.ndarray, Any]]
BackwardFn = Callable[..., Tuple[Optional[np.ndarray], ...]]


@dataclass(frozen=True)
class Primitive:
    """A differentiable operation.

    ``forward(*arrays, **attrs)`` returns ``(output, saved)`` and
    ``backward(saved, grad, *arrays, **attrs)`` returns one gradient (or
    ``None``) per input array.
    """

    name: str
    forward: ForwardFn
    backward: BackwardFn


_REGISTRY: Dict[str, Primitive] = {}


def register(name: str):
    """Decorator pairing a forward and a backward under ``name``.

    The decorated object must expose ``forward`` and ``backward`` attributes
    (a small class with two staticmethods is the usual shape).
    """

    def wrap(cls):
        if name in _REGISTRY:
            raise RuntimeError(f"primitive {name!r} registered twice")
        _REGISTRY[name] = Primitive(name, cls.forward, cls.backward)
        return cls

    return wrap


def primitive(name: str) -> Primitive:
    return _REGISTRY[name]


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.array(data, dtype=dtype, copy=True)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _check_array(arr: np.ndarray) -> None:
    if arr.ndim > MAX_RANK:
        raise RejectedInputError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
    if arr.size == 0:
        raise RejectedInputError(f"shape {arr.shape} has a zero extent")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")


class Tensor:
    """Dense row-major array of real numbers.

    The wrapped array is marked read-only; operations always return new
    tensors.  ``tape`` and ``node`` are set only for tensors that were
    produced under differentiation.
    """

    __slots__ = ("data", "requires_grad", "tape", "node")

    def __init__(self, data, requires_grad: bool = False, *, dtype=None):
        arr = _as_array(data, dtype)
        _check_array(arr)
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.tape: Optional[Tape] = None
        self.node: Optional[int] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: Optional["Tape"] = None,
              node: Optional[int] = None) -> "Tensor":
        # Trusted constructor for op outputs: no copy, validity already checked.
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.tape = tape
        t.node = node
        t.requires_grad = tape is not None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise RejectedInputError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __len__(self) -> int:
        return self.shape[0] if self.shape else 1

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


ArgRef = Union[int, np.ndarray]


@dataclass
class Node:
    """One recorded primitive application (or a named leaf when ``op`` is None)."""

    op: Optional[str]
    args: Tuple[ArgRef, ...]
    attrs: Dict[str, Any]
    value: np.ndarray
    saved: Any = None
    name: Optional[str] = None


@dataclass
class Tape:
    """Ordered record of a computation.  Confined to one thread."""

    nodes: List[Node] = field(default_factory=list)
    leaves: Dict[str, int] = field(default_factory=dict)

    def watch(self, value, name: str) -> Tensor:
        """Register ``value`` as a differentiable leaf called ``name``."""
        if name in self.leaves:
            raise RejectedInputError(f"leaf {name!r} already on tape")
        arr = _as_array(value)
        _check_array(arr)
        arr.flags.writeable = False
        idx = len(self.nodes)
        self.nodes.append(Node(None, (), {}, arr, name=name))
        self.leaves[name] = idx
        return Tensor._wrap(arr, self, idx)

    def _append(self, op: str, args, attrs, value, saved) -> int:
        self.nodes.append(Node(op, tuple(args), dict(attrs), value, saved))
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> List[np.ndarray]:
        """Recompute every node from the leaves, in recorded order."""
        values: List[np.ndarray] = []
        for node in self.nodes:
            if node.op is None:
                values.append(node.value)
                continue
            inputs = [values[a] if isinstance(a, int) else a for a in node.args]
            out, _ = primitive(node.op).forward(*inputs, **node.attrs)
            values.append(out)
        return values


def apply(op: str, *inputs: Tensor, **attrs) -> Tensor:
    """Run primitive ``op`` on ``inputs``; record it if any input is on a tape."""
    prim = primitive(op)
    arrays = [t.data for t in inputs]
    out, saved = prim.forward(*arrays, **attrs)
    out = np.asarray(out)
    _check_array(out)

    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise RejectedInputError("inputs belong to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor._wrap(out)
    args = [t.node if t.tape is tape else t.data for t in inputs]
    idx = tape._append(op, args, attrs, out, saved)
    return Tensor._wrap(out, tape, idx)


def backward(tape: Tape, loss: Tensor) -> Dict[str, Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for every named leaf on ``tape``.

    Gradients reaching a node along several paths are summed.  Leaves that do
    not influence the loss receive zeros.
    """
    if loss.size != 1:
        raise RejectedInputError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape or loss.node is None:
        raise RejectedInputError("loss was not recorded on this tape")

    grads: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.node] = np.ones_like(loss.data)
    for idx in range(loss.node, -1, -1):
        g = grads[idx]
        node = tape.nodes[idx]
        if g is None or node.op is None:
            continue
        inputs = [tape.nodes[a].value if isinstance(a, int) else a for a in node.args]
        in_grads = primitive(node.op).backward(node.saved, g, *inputs, **node.attrs)
        for a, ga in zip(node.args, in_grads):
            if ga is None or not isinstance(a, int):
                continue
            grads[a] = ga if grads[a] is None else grads[a] + ga
        grads[idx] = None  # free intermediate memory as we go

    out: Dict[str, Tensor] = {}
    for name, idx in tape.leaves.items():
        g = grads[idx]
        leaf = tape.nodes[idx].value
        out[name] = Tensor(np.zeros_like(leaf) if g is None else g.reshape(leaf.shape))
    return out
