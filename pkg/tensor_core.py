#!/usr/bin/env python3
"""
Tensor Core for the RAVEN Workbench
===================================
Dense float64 tensors with a tape-based reverse-mode differentiation graph:
- Elementwise arithmetic with leading-batch-axis broadcasting
- matmul, sum/mean reductions, exp/log/sqrt/square
- sigmoid, softplus and PReLU activations
- Backward pass over an append-only tape
- Central finite-difference gradient checks
- Flat binary save/load ("RAVTNSR1")

A Graph is rebuilt for every forward pass. Tensors created without a graph
are constants: operations on constants run eagerly and record nothing, which
is how the numerical oracles evaluate the same formulas as training does.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

TENSOR_MAGIC = b"RAVTNSR1"


class RavenError(Exception):
    """Base class for every error raised by the workbench"""


class ShapeError(RavenError):
    pass


class DomainError(RavenError):
    """log/div/sqrt applied outside their domain"""


class NonFiniteError(RavenError):
    pass


class GradientError(RavenError):
    pass


class GraphError(RavenError):
    pass


class TensorFormatError(RavenError):
    pass


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class _Node:
    op: str
    inputs: Tuple[Optional[int], ...]
    shape: Tuple[int, ...]
    vjp: Optional[VJP]


class Tensor:
    """Dense float64 array, optionally registered as a node of a Graph"""

    __slots__ = ("data", "graph", "node_id")
    # numpy operands defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, graph: Optional["Graph"] = None, node_id: Optional[int] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)

    def __getitem__(self, index: int) -> "Tensor":
        return take(self, index)

    def exp(self): return exp(self)
    def log(self): return log(self)
    def sqrt(self): return sqrt(self)
    def square(self): return square(self)
    def sigmoid(self): return sigmoid(self)
    def softplus(self): return softplus(self)
    def sum(self, axis: Optional[int] = None): return tensor_sum(self, axis)
    def mean(self, axis: Optional[int] = None): return tensor_mean(self, axis)


class GradientMap:
    """Gradients of one backward pass, looked up by tensor"""

    def __init__(self, graph: "Graph", grads: Dict[int, np.ndarray]):
        self.graph = graph
        self._grads = grads

    def of(self, tensor: Tensor) -> np.ndarray:
        if tensor.graph is not self.graph or tensor.node_id is None:
            return np.zeros(tensor.shape)
        grad = self._grads.get(tensor.node_id)
        if grad is None:
            return np.zeros(tensor.shape)
        return grad.copy()

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        return self.of(tensor)

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.graph is self.graph and tensor.node_id in self._grads


class Graph:
    """Append-only tape of operations; node inputs always point backwards"""

    def __init__(self):
        self.nodes: List[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data: ArrayLike, name: str = "leaf") -> Tensor:
        value = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        node_id = self._append(_Node(name, (), value.shape, None))
        return Tensor(value, self, node_id)

    def _append(self, node: _Node) -> int:
        for parent in node.inputs:
            if parent is not None and parent >= len(self.nodes):
                raise GraphError(f"node input {parent} does not precede node {len(self.nodes)}")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def backward(self, root: Tensor) -> GradientMap:
        if root.graph is not self or root.node_id is None:
            raise GradientError("root tensor is not recorded on this graph")
        if root.size != 1:
            raise GradientError(f"backward needs a scalar root, got shape {root.shape}")

        grads: Dict[int, np.ndarray] = {root.node_id: np.ones(root.shape)}
        for node_id in range(root.node_id, -1, -1):
            upstream = grads.get(node_id)
            node = self.nodes[node_id]
            if upstream is None or node.vjp is None:
                continue
            for parent, grad in zip(node.inputs, node.vjp(upstream)):
                if parent is None or grad is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + grad
                else:
                    grads[parent] = np.array(grad, dtype=np.float64)
        return GradientMap(self, grads)


def backward(root: Tensor) -> GradientMap:
    """Reverse-mode gradients of a scalar root with respect to every node"""
    if root.graph is None:
        raise GradientError("root is a constant; nothing to differentiate")
    return root.graph.backward(root)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _common_graph(tensors: Sequence[Tensor]) -> Optional[Graph]:
    graph = None
    for t in tensors:
        if t.graph is None or t.node_id is None:
            continue
        if graph is None:
            graph = t.graph
        elif t.graph is not graph:
            raise GraphError("operands belong to different graphs")
    return graph


def _record(op: str, value: np.ndarray, parents: Sequence[Tensor], vjp: VJP) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    graph = _common_graph(parents)
    if graph is None:
        return Tensor(value)
    inputs = tuple(p.node_id if p.graph is graph else None for p in parents)
    node_id = graph._append(_Node(op, inputs, value.shape, vjp))
    return Tensor(value, graph, node_id)


# ---------------------------------------------------------------------------
# broadcasting: equal shapes, single-element operands, or a shared trailing
# shape broadcast over the leading batch axis. Two single-element operands
# keep the higher rank.
# ---------------------------------------------------------------------------

def _operand_view(t: Tensor, other: Tensor) -> np.ndarray:
    if t.shape == other.shape:
        return t.data
    if t.size == 1 and other.size == 1:
        return t.data
    if t.size == 1:
        return t.data.reshape(())
    if other.size == 1:
        return t.data
    if t.shape[1:] == other.shape or other.shape[1:] == t.shape:
        return t.data
    raise ShapeError(f"shapes {t.shape} and {other.shape} do not conform")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if int(np.prod(shape)) == 1:
        return np.array(grad.sum()).reshape(shape)
    if grad.shape[1:] == shape:
        return grad.sum(axis=0)
    raise ShapeError(f"cannot reduce gradient {grad.shape} to {shape}")


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = _operand_view(a, b), _operand_view(b, a)
    sa, sb = a.shape, b.shape
    return _record("add", av + bv, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = _operand_view(a, b), _operand_view(b, a)
    sa, sb = a.shape, b.shape
    return _record("sub", av - bv, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = _operand_view(a, b), _operand_view(b, a)
    sa, sb = a.shape, b.shape
    return _record("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = _operand_view(a, b), _operand_view(b, a)
    if np.any(bv == 0.0):
        raise DomainError("division by zero")
    sa, sb = a.shape, b.shape
    return _record("div", av / bv, (a, b),
                   lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * av / (bv * bv), sb)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports rank 1 or 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g * bv, g * av

    return _record("matmul", av @ bv, (a, b), vjp)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")
    av = a.data
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("sqrt of a non-positive value")
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _record("square", av * av, (a,), lambda g: (2.0 * g * av,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: ArrayLike) -> Tensor:
    """log(1 + e^x), evaluated without overflow"""
    a = as_tensor(a)
    av = a.data
    slope = _stable_sigmoid(np.atleast_1d(av)).reshape(a.shape)
    return _record("softplus", np.logaddexp(0.0, av), (a,), lambda g: (g * slope,))


def prelu(x: ArrayLike, slope: ArrayLike) -> Tensor:
    """max(0, x) + a * min(0, x) with one shared learnable slope a"""
    x, slope = as_tensor(x), as_tensor(slope)
    if slope.size != 1:
        raise ShapeError(f"PReLU slope must be a single value, got shape {slope.shape}")
    xv, a = x.data, float(slope.data.reshape(()))
    negative = np.minimum(0.0, xv)
    out = np.maximum(0.0, xv) + a * negative
    s_shape = slope.shape
    return _record("prelu", out, (x, slope),
                   lambda g: (g * np.where(xv > 0.0, 1.0, a), np.array((g * negative).sum()).reshape(s_shape)))


def tensor_sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    if a.ndim == 0:
        raise ShapeError("cannot sum a rank-0 tensor along an axis")
    axis = axis % a.ndim
    return _record("sum", a.data.sum(axis=axis), (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def tensor_mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return tensor_sum(a, axis) / float(count)


def take(a: ArrayLike, index: int) -> Tensor:
    """Row `index` along the leading axis"""
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("cannot index a rank-0 tensor")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record("take", a.data[index].copy(), (a,), vjp)


def log_sum_exp(terms: Sequence[Tensor]) -> Tensor:
    """log(sum_k exp(t_k)) over a list of equally shaped tensors"""
    if not terms:
        raise ShapeError("log_sum_exp needs at least one term")
    shift = Tensor(np.maximum.reduce([t.data for t in terms]))
    total = exp(terms[0] - shift)
    for term in terms[1:]:
        total = total + exp(term - shift)
    return log(total) + shift


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: ArrayLike, h: float = 1e-5) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_ad|)

    Args:
        f: Scalar function built from tensor operations
        x: Point at which both gradients are taken
        h: Central-difference step

    Returns:
        Maximum relative disagreement between backward() and finite differences
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)

    graph = Graph()
    leaf = graph.leaf(x0, "x")
    out = as_tensor(f(leaf))
    if out.size != 1:
        raise GradientError(f"function must return a scalar, got shape {out.shape}")
    g_ad = backward(out).of(leaf) if out.tracked else np.zeros(x0.shape)

    g_fd = np.zeros(x0.shape)
    for idx in np.ndindex(x0.shape):
        plus, minus = x0.copy(), x0.copy()
        plus[idx] += h
        minus[idx] -= h
        f_plus = as_tensor(f(Tensor(plus))).item()
        f_minus = as_tensor(f(Tensor(minus))).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"function is non-finite near coordinate {idx}")
        g_fd[idx] = (f_plus - f_minus) / (2.0 * h)

    if x0.size == 0:
        return 0.0
    return float(np.max(np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_ad))))


# ---------------------------------------------------------------------------
# flat binary format: magic, u32 rank, u32 extents, little-endian f64 payload
# ---------------------------------------------------------------------------

def tensor_to_bytes(value: ArrayLike) -> bytes:
    data = np.asarray(as_tensor(value).data, dtype="<f8")
    header = TENSOR_MAGIC + struct.pack("<I", data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    return header + data.tobytes(order="C")


def tensor_from_bytes(blob: bytes) -> Tensor:
    if blob[:8] != TENSOR_MAGIC:
        raise TensorFormatError(f"bad magic {blob[:8]!r}")
    if len(blob) < 12:
        raise TensorFormatError("truncated header")
    (rank,) = struct.unpack_from("<I", blob, 8)
    offset = 12 + 4 * rank
    if len(blob) < offset:
        raise TensorFormatError("truncated extents")
    shape = struct.unpack_from(f"<{rank}I", blob, 12)
    expected = 8 * int(np.prod(shape))
    if len(blob) - offset != expected:
        raise TensorFormatError(f"payload has {len(blob) - offset} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f8", offset=offset).reshape(shape)
    return Tensor(data.astype(np.float64))


def save_tensor(path: Union[str, Path], value: ArrayLike) -> Path:
    path = Path(path)
    path.write_bytes(tensor_to_bytes(value))
    return path


def load_tensor(path: Union[str, Path]) -> Tensor:
    return tensor_from_bytes(Path(path).read_bytes())
