"""Dense NCHW tensors and a tape-based reverse-mode autograd engine.

Every differentiable operation is a :class:`Function` subclass. Calling
``SomeFunction.apply(*tensors, **attrs)`` runs the forward pass on numpy
arrays and, when any input requires a gradient, appends a node to the
thread-local :class:`Graph`. :func:`backward` walks that node list once, in
reverse append order, and then discards the graph.

The same ``apply`` entry point also accepts :class:`MetaTensor` inputs. In
that case only the output shape is inferred and the call is reported to the
active :class:`Tracer`; the complexity accounting is built on this.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class GraphError(RuntimeError):
    """Raised on misuse of the autograd graph (non-scalar backward, stale tensors)."""


_state = threading.local()


def _local(name: str, default_factory: Callable[[], Any]) -> Any:
    if not hasattr(_state, name):
        setattr(_state, name, default_factory())
    return getattr(_state, name)


def default_dtype() -> np.dtype:
    return _local("dtype", lambda: np.dtype(np.float32))


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled() -> bool:
    return _local("grad_enabled", lambda: True)


@contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense array plus autograd bookkeeping.

    ``data`` is treated as immutable once the tensor exists; the optimizer is
    the only code that writes into parameter buffers, and it does so between
    graph executions.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[tuple[int, int]] = None  # (graph id, node index)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the functional forms live in dntdf.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__


class MetaTensor:
    """Shape-only stand-in used for static tracing; carries no data."""

    _ids = itertools.count()

    def __init__(self, shape: Sequence[int], name: Optional[str] = None, is_param: bool = False):
        self.shape = tuple(int(s) for s in shape)
        self.name = name
        self.is_param = is_param
        self.requires_grad = is_param
        self.id = next(MetaTensor._ids)
        self.grad = None

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def __repr__(self) -> str:
        return f"MetaTensor(shape={self.shape}, id={self.id})"


@dataclass
class Node:
    tag: str
    inputs: tuple[int, ...]
    fn: Optional["Function"] = None  # None for leaves
    leaf: Optional[Tensor] = None


class Graph:
    """Append-only node list; inputs always precede the nodes that use them."""

    _ids = itertools.count()

    def __init__(self) -> None:
        self.id = next(Graph._ids)
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def node_of(self, t: Tensor) -> Optional[int]:
        if t._node is not None and t._node[0] == self.id:
            return t._node[1]
        return None

    def register_leaf(self, t: Tensor) -> int:
        idx = self.node_of(t)
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(Node("leaf", (), leaf=t))
            t._node = (self.id, idx)
        return idx

    def append(self, fn: "Function", inputs: tuple[int, ...], out: Tensor) -> int:
        idx = len(self.nodes)
        self.nodes.append(Node(type(fn).__name__, inputs, fn=fn))
        out._node = (self.id, idx)
        return idx


def current_graph() -> Graph:
    return _local("graph", Graph)


def reset_graph() -> Graph:
    _state.graph = Graph()
    return _state.graph


# --------------------------------------------------------------------------
# static tracing


@dataclass
class TraceRecord:
    """One primitive call observed while tracing with meta tensors."""

    index: int
    op: str
    scope: str
    component: Optional[str]
    inputs: list[MetaTensor]
    output: MetaTensor
    attrs: dict[str, Any] = field(default_factory=dict)


class Tracer:
    def __init__(self) -> None:
        self.records: list[TraceRecord] = []
        self.scopes: list[tuple[str, Optional[str]]] = []
        self._concrete: dict[int, MetaTensor] = {}
        self._keepalive: list[Tensor] = []

    def push(self, name: str, component: Optional[str]) -> None:
        self.scopes.append((name, component))

    def pop(self) -> None:
        self.scopes.pop()

    @property
    def scope(self) -> str:
        # modules inside a built model push their full dotted path
        for name, _ in reversed(self.scopes):
            if name:
                return name
        return ""

    @property
    def component(self) -> Optional[str]:
        for _, comp in reversed(self.scopes):
            if comp is not None:
                return comp
        return None

    def meta_for(self, t: Tensor, produced: bool = False) -> MetaTensor:
        """Stable shape-only handle for a concrete tensor seen during tracing.

        Tensors first seen as an op output are activations; anything else
        that requires a gradient is treated as a parameter.
        """
        meta = self._concrete.get(id(t))
        if meta is None:
            meta = MetaTensor(t.shape, name=t.name, is_param=t.requires_grad and not produced)
            self._concrete[id(t)] = meta
            self._keepalive.append(t)
        return meta

    def record(self, op: str, inputs: list[MetaTensor], output: MetaTensor, attrs: dict) -> None:
        self.records.append(TraceRecord(len(self.records), op, self.scope, self.component,
                                        inputs, output, attrs))


def active_tracer() -> Optional[Tracer]:
    return getattr(_state, "tracer", None)


@contextmanager
def tracing() -> Iterator[Tracer]:
    prev = active_tracer()
    tracer = Tracer()
    _state.tracer = tracer
    try:
        yield tracer
    finally:
        _state.tracer = prev


# --------------------------------------------------------------------------
# differentiable functions


class Function:
    """Base class for differentiable primitives.

    Subclasses implement ``forward`` (numpy in, numpy out), ``backward``
    (gradient of the output in, one gradient or ``None`` per input out) and
    ``infer_shape`` for static tracing. State needed by ``backward`` is kept
    on ``self``.
    """

    def __init__(self) -> None:
        self.needs_grad: tuple[bool, ...] = ()

    @staticmethod
    def infer_shape(*shapes: tuple[int, ...], **attrs) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, *arrays: np.ndarray, **attrs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **attrs):
        if any(isinstance(t, MetaTensor) for t in inputs):
            return cls._apply_meta(inputs, attrs)
        fn = cls()
        data = fn.forward(*(t.data for t in inputs), **attrs)
        out = Tensor(data, dtype=inputs[0].data.dtype)
        if grad_enabled() and any(t.requires_grad for t in inputs):
            graph = current_graph()
            fn.needs_grad = tuple(t.requires_grad for t in inputs)
            # tensors from an already consumed graph enter as leaves (constants upstream)
            ids = tuple(graph.register_leaf(t) if graph.node_of(t) is None else graph.node_of(t)
                        for t in inputs)
            graph.append(fn, ids, out)
            out.requires_grad = True
        tracer = active_tracer()
        if tracer is not None:  # runtime shape log, compared against the static trace
            tracer.record(cls.op_name(), [tracer.meta_for(t) for t in inputs], tracer.meta_for(out, produced=True), dict(attrs))
        return out

    @classmethod
    def _apply_meta(cls, inputs, attrs):
        shapes = [t.shape for t in inputs]
        out = MetaTensor(cls.infer_shape(*shapes, **attrs))
        tracer = active_tracer()
        if tracer is not None:
            metas = [t if isinstance(t, MetaTensor) else tracer.meta_for(t) for t in inputs]
            tracer.record(cls.op_name(), metas, out, dict(attrs))
        return out

    @classmethod
    def op_name(cls) -> str:
        return getattr(cls, "tag", cls.__name__.lower())


def backward(loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaves recorded in the graph (and any extra ``params`` passed in) that do
    not influence the loss receive a zero gradient. The graph is consumed:
    a second call for the same forward pass raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = current_graph()
    root = graph.node_of(loss)
    if root is None:
        raise GraphError("loss is not part of the active graph (already consumed or never tracked)")

    grads: dict[int, np.ndarray] = {root: np.ones(loss.shape, dtype=loss.dtype)}
    leaves: list[Tensor] = []
    for idx in range(root, -1, -1):
        node = graph.nodes[idx]
        if node.fn is None:
            t = node.leaf
            g = grads.pop(idx, None)
            if t.requires_grad:
                t.grad = g if g is not None else np.zeros_like(t.data)
                leaves.append(t)
            continue
        g = grads.pop(idx, None)
        if g is None:
            continue
        in_grads = node.fn.backward(g)
        for src, need, ig in zip(node.inputs, node.fn.needs_grad, in_grads):
            if not need or ig is None:
                continue
            if src in grads:
                grads[src] = grads[src] + ig
            else:
                grads[src] = ig
    # leaves appended after the loss node cannot reach it
    for node in graph.nodes[root + 1:]:
        if node.fn is None and node.leaf.requires_grad:
            node.leaf.grad = np.zeros_like(node.leaf.data)
    if params is not None:
        seen = {id(t) for t in leaves}
        for p in params:
            if id(p) not in seen and p.grad is None:
                p.grad = np.zeros_like(p.data)
    reset_graph()
