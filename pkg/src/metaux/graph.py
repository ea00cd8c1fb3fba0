"""Dense tensors on a recorded computation graph with reverse-mode backward.

The graph is a flat tape: every primitive application appends exactly one
node, so topological order is append order and the tape is acyclic by
construction.  Backward walks the tape once in reverse append order.  The
vector-Jacobian rules are themselves written in terms of primitives, so a
backward pass run with ``create_graph=True`` records its own operations on
the same tape and the resulting gradient tensors can be differentiated
again.  That is what makes second-order meta-gradients exact rather than
approximated.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import GraphError, ShapeError, UnknownKindError

_LOCAL = threading.local()


def _recording() -> bool:
    return getattr(_LOCAL, "recording", True)


@contextmanager
def no_recording() -> Iterator[None]:
    """Disable tape recording in this thread for the enclosed block.

    Used by backward when ``create_graph=False``: vjp rules still run
    through ``apply_primitive`` but produce plain value tensors.
    """
    prev = _recording()
    _LOCAL.recording = False
    try:
        yield
    finally:
        _LOCAL.recording = prev


class Tensor:
    """A dense float64 array, optionally attached to a graph node.

    ``data`` is row-major and marked read-only; tensors are immutable
    values, which makes sharing them across concurrently built graphs safe.
    """

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, graph: "ComputationGraph | None" = None, node_id: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.flags["WRITEABLE"]:
            if arr is data:
                # Never freeze an array the caller still owns.
                arr = arr.copy()
            arr.setflags(write=False)
        self.data = arr
        self.graph = graph
        self.node_id = node_id

    @classmethod
    def _owned(cls, arr: np.ndarray, graph: "ComputationGraph | None" = None,
               node_id: int | None = None) -> "Tensor":
        """Wrap an array we exclusively own, freezing it without a copy."""
        t = cls.__new__(cls)
        if arr.dtype != np.float64 or not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.flags["WRITEABLE"]:
            arr.setflags(write=False)
        t.data = arr
        t.graph = graph
        t.node_id = node_id
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
    def in_graph(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Return a constant tensor sharing this tensor's values."""
        if self.node_id is None:
            return self
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Operator sugar; the real work happens in apply_primitive.
    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        return apply_primitive("mul", [self, other])

    def __rmul__(self, other):
        return apply_primitive("mul", [other, self])

    def __truediv__(self, other):
        # Division by tensors is deliberately unsupported; scale by a
        # reciprocal constant instead so the primitive catalog stays small.
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; multiply by a constant reciprocal")
        return apply_primitive("mul", [self, 1.0 / float(other)])

    def __neg__(self):
        return apply_primitive("neg", [self])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def sum(self, axis=None, keepdims: bool = False):
        return apply_primitive("sum", [self], {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims: bool = False):
        return apply_primitive("mean", [self], {"axis": axis, "keepdims": keepdims})

    def reshape(self, shape):
        return apply_primitive("reshape", [self], {"shape": tuple(shape)})

    def transpose(self, axes=None):
        return apply_primitive("transpose", [self], {"axes": None if axes is None else tuple(axes)})

    def exp(self):
        return apply_primitive("exp", [self])

    def log(self):
        return apply_primitive("log", [self])

    def square(self):
        return apply_primitive("square", [self])


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Node:
    """One primitive application on the tape.

    ``inputs`` keeps the input tensors themselves (values plus node refs);
    ``input_ids`` is None for constant operands.  ``saved`` holds forward
    by-products a vjp rule needs (e.g. the argmax mask of a pooling node).
    """

    __slots__ = ("kind", "attrs", "inputs", "input_ids", "output", "saved")

    def __init__(self, kind: str, attrs: Mapping[str, Any], inputs: tuple[Tensor, ...],
                 output: Tensor, saved: Mapping[str, Any] | None):
        self.kind = kind
        self.attrs = attrs
        self.inputs = inputs
        self.input_ids = tuple(t.node_id for t in inputs)
        self.output = output
        self.saved = saved


class ComputationGraph:
    """Append-only tape of primitive applications.

    A graph instance must only be built from one thread; distinct graphs
    are independent and safe to use concurrently.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def release(self) -> None:
        """Drop the tape so its arrays free immediately by refcount.

        The tape holds reference cycles (graph -> node -> tensor -> graph);
        without an explicit release, multi-megabyte buffers linger until a
        full garbage collection.  After release the graph can no longer be
        differentiated.
        """
        self.nodes.clear()

    def watch(self, value) -> Tensor:
        """Register a value as a differentiable leaf of this graph."""
        src = as_tensor(value)
        out = Tensor(src.data, graph=self, node_id=len(self.nodes))
        self.nodes.append(Node("leaf", {}, (), out, None))
        return out

    def _record(self, kind: str, attrs: Mapping[str, Any], inputs: tuple[Tensor, ...],
                data: np.ndarray, saved: Mapping[str, Any] | None) -> Tensor:
        out = Tensor._owned(data, graph=self, node_id=len(self.nodes))
        self.nodes.append(Node(kind, attrs, inputs, out, saved))
        return out


# kind -> (forward, vjp). forward(datas, attrs) -> (out_array, saved|None);
# vjp(node, cotangent) -> tuple of cotangents aligned with node.inputs.
_FORWARD: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}


def register_primitive(kind: str, forward: Callable, vjp: Callable) -> None:
    if kind in _FORWARD:
        raise ValueError(f"primitive {kind!r} registered twice")
    _FORWARD[kind] = forward
    _VJP[kind] = vjp


def primitive_kinds() -> tuple[str, ...]:
    return tuple(sorted(_FORWARD))


def apply_primitive(kind: str, inputs: Sequence, attrs: Mapping[str, Any] | None = None) -> Tensor:
    """Apply one primitive, recording a single node when a graph is active.

    Operands may be tensors, arrays, or scalars; non-tensors become
    constants.  All tensor operands must belong to the same graph (or none).
    """
    if kind not in _FORWARD:
        raise UnknownKindError(f"unknown primitive kind {kind!r}")
    tensors = tuple(as_tensor(x) for x in inputs)
    attrs = dict(attrs) if attrs else {}

    graph: ComputationGraph | None = None
    for t in tensors:
        if t.graph is not None:
            if graph is None:
                graph = t.graph
            elif graph is not t.graph:
                raise GraphError(f"{kind}: operands belong to different computation graphs")

    result = _FORWARD[kind]([t.data for t in tensors], attrs)
    data, saved = result if isinstance(result, tuple) else (result, None)
    data = np.asarray(data, dtype=np.float64)

    if graph is not None and _recording():
        return graph._record(kind, attrs, tensors, data, saved)
    return Tensor._owned(data)


class GradientMap:
    """Gradients of a scalar root, keyed by graph node.

    Every leaf of the graph has an entry (zero-filled when the root does
    not depend on it); interior nodes appear only if they were reached.
    """

    __slots__ = ("graph", "_grads")

    def __init__(self, graph: ComputationGraph, grads: dict[int, Tensor]):
        self.graph = graph
        self._grads = grads

    def grad(self, tensor: Tensor) -> Tensor:
        if tensor.graph is not self.graph or tensor.node_id is None:
            raise GraphError("tensor is not a node of the differentiated graph")
        try:
            return self._grads[tensor.node_id]
        except KeyError:
            raise GraphError(f"no gradient recorded for node {tensor.node_id}") from None

    def get(self, tensor: Tensor, default: Tensor | None = None) -> Tensor | None:
        if tensor.graph is not self.graph or tensor.node_id is None:
            return default
        return self._grads.get(tensor.node_id, default)

    def __contains__(self, tensor: Tensor) -> bool:
        return (tensor.graph is self.graph and tensor.node_id is not None
                and tensor.node_id in self._grads)


def backward(graph: ComputationGraph, root: Tensor, *, create_graph: bool = False) -> GradientMap:
    """Reverse-mode sweep from a scalar root over the tape.

    With ``create_graph=True`` the vjp operations are recorded on the same
    tape, so returned gradients are graph nodes and can be differentiated
    again (exact higher-order derivatives).  Otherwise they are detached
    values.
    """
    if root.graph is not graph or root.node_id is None:
        raise GraphError("backward root is not a node of this graph")
    if root.size != 1:
        raise GraphError(f"backward root must be scalar-shaped, got shape {root.shape}")

    cot: dict[int, Tensor] = {root.node_id: Tensor(np.ones(root.shape))}
    start = root.node_id

    def sweep() -> None:
        for i in range(start, -1, -1):
            if i not in cot:
                continue
            node = graph.nodes[i]
            if node.kind == "leaf":
                continue
            grads_in = _VJP[node.kind](node, cot[i])
            for t, g in zip(node.inputs, grads_in):
                if g is None or t.node_id is None or t.graph is not graph:
                    continue
                prev = cot.get(t.node_id)
                cot[t.node_id] = g if prev is None else apply_primitive("add", [prev, g])

    if create_graph:
        sweep()
    else:
        with no_recording():
            sweep()

    for i, node in enumerate(graph.nodes):
        if node.kind == "leaf" and i not in cot:
            cot[i] = Tensor(np.zeros(node.output.shape))
    return GradientMap(graph, cot)


def _shape_err(kind: str, msg: str) -> ShapeError:
    return ShapeError(f"{kind}: {msg}")
