"""Define-by-run reverse-mode differentiation.

A :class:`Tape` owns a set of named parameters and an append-only list of
recorded nodes.  Operations in :mod:`sifdal.ops` append to the tape of their
first input; :func:`backward` walks the list in reverse recording order.

Values are float64 ``ndarray`` objects marked read-only, so a recorded value
can be shared freely without defensive copies.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError


def as_value(x) -> np.ndarray:
    """Coerce to a read-only float64 array (the package's tensor value)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.flags.writeable:
        arr = arr.view()
        arr.flags.writeable = False
    return arr


class Node:
    __slots__ = ("tape", "id", "op", "inputs", "value", "vjp", "requires_grad", "name")

    def __init__(self, tape, node_id, op, inputs, value, vjp, requires_grad, name=None):
        self.tape = tape
        self.id = node_id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        label = self.name or self.op
        return f"Node(#{self.id} {label} shape={self.shape})"

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


class Tape:
    """Recording context plus the parameter set it differentiates against.

    ``trainable`` maps parameter names to booleans; names absent from it are
    trainable.  Frozen parameters still take part in the forward pass but get
    no gradient entry from :func:`backward`.
    """

    def __init__(self, params: Mapping[str, np.ndarray] | None = None,
                 trainable: Mapping[str, bool] | None = None):
        self.params = {k: as_value(v) for k, v in (params or {}).items()}
        self.trainable = {k: True for k in self.params}
        if trainable:
            for k, flag in trainable.items():
                if k not in self.params:
                    raise ContractError(f"trainable mask names unknown parameter {k!r}")
                self.trainable[k] = bool(flag)
        self.nodes: list[Node] = []
        self._leaves: dict[str, Node] = {}
        # activation patterns of piecewise ops, consumed by gradient checking
        self.kinks: list[np.ndarray] = []

    def __len__(self):
        return len(self.nodes)

    def set_trainable(self, names: Iterable[str], flag: bool) -> None:
        for name in names:
            if name not in self.params:
                raise ContractError(f"unknown parameter {name!r}")
            if name in self._leaves:
                raise ContractError(f"parameter {name!r} already recorded; set masks before use")
            self.trainable[name] = bool(flag)

    def trainable_names(self) -> list[str]:
        return [k for k, v in self.trainable.items() if v]

    def param(self, name: str) -> Node:
        """Leaf node for a named parameter; repeated calls return the same node."""
        node = self._leaves.get(name)
        if node is None:
            if name not in self.params:
                raise ContractError(f"unknown parameter {name!r}")
            node = self._append("param", (), self.params[name], None, self.trainable[name], name)
            self._leaves[name] = node
        return node

    def const(self, value) -> Node:
        return self._append("const", (), as_value(value), None, False)

    def record(self, op: str, inputs: Sequence[Node], value: np.ndarray,
               vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Node:
        for node in inputs:
            if node.tape is not self:
                raise ContractError(f"{op}: input {node!r} belongs to a different tape")
        requires_grad = any(n.requires_grad for n in inputs)
        return self._append(op, tuple(inputs), as_value(value), vjp if requires_grad else None, requires_grad)

    def _append(self, op, inputs, value, vjp, requires_grad, name=None) -> Node:
        node = Node(self, len(self.nodes), op, inputs, value, vjp, requires_grad, name)
        self.nodes.append(node)
        return node


def lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.const(x)


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable parameter of ``tape``.

    Trainable parameters the loss does not depend on get all-zero entries;
    frozen ones get none.
    """
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise ContractError("loss must be a node recorded on this tape")
    if loss.value.ndim != 0:
        raise ContractError(f"loss must be 0-dimensional, got shape {loss.value.shape}")

    grads: dict[int, np.ndarray] = {loss.id: np.ones(())}
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = grads.pop(node.id, None) if node.vjp is not None else grads.get(node.id)
        if g is None or node.vjp is None:
            continue
        input_grads = node.vjp(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.value.shape:
                raise DimensionError(
                    f"{node.op}: gradient shape {ig.shape} does not match input shape {inp.value.shape}")
            prev = grads.get(inp.id)
            grads[inp.id] = ig if prev is None else prev + ig

    out = {}
    for name, flag in tape.trainable.items():
        if not flag:
            continue
        leaf = tape._leaves.get(name)
        g = grads.get(leaf.id) if leaf is not None else None
        out[name] = np.zeros_like(tape.params[name]) if g is None else np.asarray(g, dtype=np.float64)
    return out
