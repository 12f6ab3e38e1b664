"""Dense tensors and the tape that records operations for reverse-mode AD.

A ``Tape`` is confined to the thread that opened it. Operations record a node
only while a tape is active and at least one input is a trainable parameter or
was itself produced by a recorded node, so inference runs with no tape pay
nothing for differentiation.
"""
from __future__ import annotations

import threading
import typing as t
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_local = threading.local()


class Tensor:
    __slots__ = ("data", "is_param", "requires_grad", "node", "__weakref__")

    def __init__(self, data: t.Any, dtype: t.Any = None, *, is_param: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.is_param = is_param
        self.requires_grad = is_param
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        kind = "param" if self.is_param else "tensor"
        return f"Tensor({kind}, shape={self.shape}, dtype={self.dtype})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def parameter(data: t.Any, dtype: t.Any = np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), is_param=True)


def as_tensor(value: t.Any, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


Backward = t.Callable[[np.ndarray], t.Sequence["np.ndarray | None"]]


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Backward
    tape: "Tape"


class Tape:
    """Ordered record of operations; creation order is a topological order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc: t.Any) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class paused:
    """Suspend recording inside an active tape (used for finite differences)."""

    def __enter__(self) -> None:
        self._saved = getattr(_local, "stack", None)
        _local.stack = []

    def __exit__(self, *exc: t.Any) -> None:
        _local.stack = self._saved


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def record(op: str, inputs: t.Sequence[Tensor], out: np.ndarray, backward: Backward) -> Tensor:
    result = Tensor(out)
    tape = current_tape()
    if tape is not None and any(x.tracked() for x in inputs):
        node = Node(op, tuple(inputs), result, backward, tape)
        result.node = node
        tape.nodes.append(node)
    return result


class GradientMap(dict):
    """Parameter tensor -> gradient array, keyed by tensor identity."""

    def norm(self) -> float:
        total = 0.0
        for g in self.values():
            total += float(np.sum(np.square(g, dtype=np.float64)))
        return float(np.sqrt(total))


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Propagate d(loss)/d(.) through ``tape`` and return parameter gradients.

    Frozen parameters and plain leaves receive no entry.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = GradientMap()
    if loss.node is None:
        if loss.requires_grad:
            grads[loss] = np.ones_like(loss.data)
        return grads
    if loss.node.tape is not tape:
        raise ContractError("loss was not recorded on this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for x, gx in zip(node.inputs, node.backward(g)):
            if gx is None or not x.tracked():
                continue
            key = id(x)
            prev = pending.get(key)
            pending[key] = gx if prev is None else prev + gx
            if x.node is None:
                leaves[key] = x
    for key, leaf in leaves.items():
        if leaf.requires_grad:
            grads[leaf] = pending[key].astype(leaf.dtype, copy=False)
    return grads
