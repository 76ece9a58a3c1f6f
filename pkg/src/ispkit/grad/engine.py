"""Reverse-mode gradient engine: Tensor values, the recording Tape, backward.

Values are numpy arrays (float32 in production, float64 in verification
mode; ops follow the dtype of their inputs). While a Tape is active, every
primitive appends its output node to the tape in creation order, which is a
valid topological order because nodes are written exactly once. `backward`
walks that list in reverse, accumulating gradients into parent tensors.

Convention: operands passed as Tensors receive gradients; operands passed
as plain numpy arrays (targets, masks, frozen conditioning) are constants.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError

# Per-op output finiteness check. Training loops may disable it for speed;
# the per-step loss check in train stays on regardless.
STRICT_FINITE = True


def set_strict_finite(flag: bool) -> bool:
    global STRICT_FINITE
    previous = STRICT_FINITE
    STRICT_FINITE = bool(flag)
    return previous


class Tensor:
    """N-dimensional array node of the computation graph."""

    __slots__ = ("data", "grad", "node_id", "_backward", "name")

    def __init__(self, data, name: str = ""):
        self.data = np.asarray(data)
        self.grad = None
        self.node_id = None
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"

    # Small operator sugar; the full op set lives in grad.ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scalar_mul(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__


class Tape:
    """Ordered record of primitive outputs; single-writer, single-assignment."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: Tensor) -> None:
        node.node_id = len(self.nodes)
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def make_node(data: np.ndarray, backward=None) -> Tensor:
    """Register an op output on the active tape (if any)."""
    if STRICT_FINITE and not np.isfinite(data).all():
        raise FloatingPointError("non-finite values produced by a primitive op")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        out._backward = backward
        tape.record(out)
    return out


def value_of(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse-topological gradient accumulation from a scalar loss node."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss.node_id is None:
        raise ValueError("loss node was not recorded on a tape")
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
