"""
A minimal reverse-mode tape over dense float64 numpy arrays.

Every operation records its output value together with a closure that maps the
output adjoint to the adjoints of its inputs. `Tape.gradient` walks the recorded
nodes once, in reverse order, and returns the adjoint of every named parameter.
A tape answers exactly one gradient query.
"""

from collections.abc import Callable, Sequence

import numpy as np

from semantic_smoothing.errors import StructuralError, TapeUsageError
from semantic_smoothing.services.statistics import SQRT_2PI, std_normal_quantile_array

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Node:
    """A recorded value on a tape."""

    __slots__ = ("backward", "index", "parents", "tape", "value")

    def __init__(
        self,
        tape: "Tape",
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        backward: Backward | None = None,
    ) -> None:
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward = backward
        self.index = len(tape.nodes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return mul(self, other)

    def __neg__(self) -> "Node":
        return scale(self, -1.0)


class Tape:
    """Single-use recording of a computation."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.parameters: dict[str, Node] = {}
        self.consumed = False

    def _record(
        self,
        value: np.ndarray,
        parents: tuple[Node, ...] = (),
        backward: Backward | None = None,
    ) -> Node:
        if self.consumed:
            raise TapeUsageError("cannot record on a tape whose gradient was already taken")
        for parent in parents:
            if parent.tape is not self:
                raise TapeUsageError("operands belong to a different tape")
        node = Node(self, np.asarray(value, dtype=np.float64), parents, backward)
        self.nodes.append(node)
        return node

    def constant(self, value: np.ndarray | float) -> Node:
        return self._record(np.array(value, dtype=np.float64))

    def parameter(self, name: str, value: np.ndarray) -> Node:
        if name in self.parameters:
            return self.parameters[name]
        node = self._record(np.array(value, dtype=np.float64))
        self.parameters[name] = node
        return node

    def gradient(self, output: Node, seed: float = 1.0) -> dict[str, np.ndarray]:
        """
        Back-propagate `seed` from a scalar output.

        Returns:
            Adjoint of every parameter registered on this tape (zeros when unused).

        Raises:
            TapeUsageError: if the tape was already consumed or `output` is foreign.
        """
        if self.consumed:
            raise TapeUsageError("tape already consumed; run a fresh forward pass")
        if output.tape is not self:
            raise TapeUsageError("output node belongs to a different tape")
        if output.value.size != 1:
            raise StructuralError(f"gradient needs a scalar output, got shape {output.shape}")
        self.consumed = True

        adjoints: list[np.ndarray | None] = [None] * len(self.nodes)
        adjoints[output.index] = np.full(output.shape, float(seed))
        for node in reversed(self.nodes[: output.index + 1]):
            adjoint = adjoints[node.index]
            if adjoint is None or node.backward is None:
                continue
            for parent, parent_adjoint in zip(node.parents, node.backward(adjoint), strict=True):
                if parent_adjoint is None:
                    continue
                current = adjoints[parent.index]
                adjoints[parent.index] = parent_adjoint if current is None else current + parent_adjoint

        gradients = {}
        for name, node in self.parameters.items():
            adjoint = adjoints[node.index]
            gradients[name] = np.zeros_like(node.value) if adjoint is None else np.array(adjoint)
        return gradients


def _unbroadcast(adjoint: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint over the axes that broadcasting added or stretched."""
    while adjoint.ndim > len(shape):
        adjoint = adjoint.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and adjoint.shape[axis] != 1:
            adjoint = adjoint.sum(axis=axis, keepdims=True)
    return adjoint


def add(a: Node, b: Node) -> Node:
    return a.tape._record(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Node, b: Node) -> Node:
    return a.tape._record(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Node, b: Node) -> Node:
    return a.tape._record(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(a: Node, factor: float) -> Node:
    return a.tape._record(a.value * factor, (a,), lambda g: (g * factor,))


def shift(a: Node, offset: float) -> Node:
    return a.tape._record(a.value + offset, (a,), lambda g: (g,))


def abs_(a: Node) -> Node:
    return a.tape._record(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def relu(a: Node) -> Node:
    # Subgradient 0 at the kink.
    mask = a.value > 0.0
    return a.tape._record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def square(a: Node) -> Node:
    return a.tape._record(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def sqrt(a: Node) -> Node:
    """Square root; the adjoint is taken as 0 where the value is 0."""
    value = np.sqrt(a.value)
    positive = value > 0.0
    safe = np.where(positive, value, 1.0)
    return a.tape._record(value, (a,), lambda g: (np.where(positive, 0.5 * g / safe, 0.0),))


def exp(a: Node) -> Node:
    value = np.exp(a.value)
    return a.tape._record(value, (a,), lambda g: (g * value,))


def log(a: Node) -> Node:
    return a.tape._record(np.log(a.value), (a,), lambda g: (g / a.value,))


def clip(a: Node, low: float, high: float) -> Node:
    """Clamp into [low, high]; no adjoint flows through clamped entries."""
    inside = (a.value >= low) & (a.value <= high)
    return a.tape._record(np.clip(a.value, low, high), (a,), lambda g: (g * inside,))


def maximum(a: Node, b: Node) -> Node:
    """Elementwise maximum; ties send the adjoint to `a`."""
    take_a = a.value >= b.value
    return a.tape._record(
        np.where(take_a, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def total(a: Node, axis: int | None = None) -> Node:
    value = a.value.sum(axis=axis)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return a.tape._record(value, (a,), backward)


def mean(a: Node, axis: int | None = None) -> Node:
    count = a.value.size if axis is None else a.shape[axis]
    return scale(total(a, axis), 1.0 / count)


def matmul(x: Node, w: Node) -> Node:
    """x[..., in] @ w[in, out]."""
    if x.shape[-1] != w.shape[0]:
        raise StructuralError(f"affine input width {x.shape[-1]} does not match weight {w.shape}")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        flat_x = x.value.reshape(-1, x.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        return g @ w.value.T, flat_x.T @ flat_g

    return x.tape._record(x.value @ w.value, (x, w), backward)


def conv1d(x: Node, w: Node) -> Node:
    """
    Valid 1-D convolution over the sequence axis.

    x has shape (..., length, in_channels) and w has shape
    (out_channels, in_channels, kernel); the result has shape
    (..., length - kernel + 1, out_channels).
    """
    out_channels, in_channels, kernel = w.shape
    length = x.shape[-2]
    if x.shape[-1] != in_channels:
        raise StructuralError(f"conv1d expects {in_channels} input channels, got {x.shape[-1]}")
    if length < kernel:
        raise StructuralError(f"sequence of length {length} is shorter than kernel {kernel}")
    windows = np.lib.stride_tricks.sliding_window_view(x.value, kernel, axis=-2)
    value = np.einsum("...lck,ock->...lo", windows, w.value)
    out_length = length - kernel + 1

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_w = np.einsum("...lck,...lo->ock", windows, g)
        grad_x = np.zeros_like(x.value)
        for offset in range(kernel):
            grad_x[..., offset : offset + out_length, :] += g @ w.value[:, :, offset]
        return grad_x, grad_w

    return x.tape._record(value, (x, w), backward)


def mean_pool(x: Node) -> Node:
    """Average over the sequence axis (-2)."""
    length = x.shape[-2]

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(np.expand_dims(g, -2) / length, x.shape).copy(),)

    return x.tape._record(x.value.mean(axis=-2), (x,), backward)


def log_softmax(x: Node) -> Node:
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    value = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(value)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return x.tape._record(value, (x,), backward)


def gather_rows(table: Node, ids: np.ndarray) -> Node:
    """Look up rows of a (vocab, dim) table by integer ids of any shape."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(table.value)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (grad,)

    return table.tape._record(table.value[ids], (table,), backward)


def pick(x: Node, indices: np.ndarray) -> Node:
    """Select one entry of the last axis per leading position; `indices` has shape x.shape[:-1]."""
    index = np.broadcast_to(np.asarray(indices, dtype=np.int64), x.shape[:-1])[..., None]

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.value)
        np.put_along_axis(grad, index, g[..., None], axis=-1)
        return (grad,)

    return x.tape._record(np.take_along_axis(x.value, index, axis=-1)[..., 0], (x,), backward)


def normal_quantile(p: Node) -> Node:
    """Elementwise Φ⁻¹ with adjoint 1 / φ(Φ⁻¹(p))."""
    value = std_normal_quantile_array(p.value)
    density = np.exp(-0.5 * value * value) / SQRT_2PI
    return p.tape._record(value, (p,), lambda g: (g / density,))
