"""
Text GAN Toolkit - Reverse-Mode Automatic Differentiation

Define-by-run tape over dense float64 numpy arrays.

Every primitive evaluates eagerly and appends one record to its Graph, so
insertion order is a topological order. A record keeps the op name, the ids
of its inputs, the forward value, a pure forward function (used by
Graph.forward to replay the tape with overridden values) and an adjoint rule.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

Tensor = np.ndarray

BackwardFn = Callable[..., Tuple[Optional[Tensor], ...]]


class ShapeError(ValueError):
    """Raised when a primitive receives inputs that violate its shape rule."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass produces NaN or Inf."""


@dataclass
class NodeRecord:
    """One operation on the tape"""
    op: str
    inputs: Tuple[int, ...]
    value: Tensor
    forward_fn: Optional[Callable[..., Tensor]] = None
    backward_fn: Optional[BackwardFn] = None
    is_param: bool = False
    name: str = ""


class Node:
    """Handle to a record of a Graph. Supports + - * @ with nodes or constants."""

    __slots__ = ("graph", "id")
    __array_ufunc__ = None  # ndarray (op) Node defers to Node's reflected operators

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> Tensor:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        rec = self.graph.nodes[self.id]
        return f"Node(id={self.id}, op={rec.op}, shape={rec.value.shape})"


@dataclass
class GradientMap:
    """Gradients of a scalar output, keyed by node id; parameters also by name."""
    grads: Dict[int, Tensor] = field(default_factory=dict)
    names: Dict[str, int] = field(default_factory=dict)

    def __getitem__(self, key: Union[Node, int, str]) -> Tensor:
        if isinstance(key, str):
            key = self.names[key]
        elif isinstance(key, Node):
            key = key.id
        return self.grads[key]

    def __contains__(self, key) -> bool:
        if isinstance(key, str):
            return key in self.names
        if isinstance(key, Node):
            key = key.id
        return key in self.grads

    def params(self) -> Dict[str, Tensor]:
        """Parameter gradients by parameter name"""
        return {name: self.grads[node_id] for name, node_id in self.names.items()}

    def flat(self, names: Optional[Sequence[str]] = None) -> Tensor:
        """Concatenate parameter gradients (sorted by name unless given) into one vector"""
        keys = sorted(self.names) if names is None else list(names)
        if not keys:
            return np.zeros(0)
        return np.concatenate([self[name].ravel() for name in keys])


class Graph:
    """
    Tape of operation records.

    Single-threaded: one graph is built and differentiated by one caller.
    Distinct graphs share nothing.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: List[NodeRecord] = []
        self.check_finite = check_finite
        self._param_ids: Dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    # Leaves

    def param(self, name: str, array: Tensor) -> Node:
        """Register a trainable array. Names are unique per graph."""
        if name in self._param_ids:
            return Node(self, self._param_ids[name])
        node = self._append(NodeRecord("param", (), _as_f64(array), is_param=True, name=name))
        self._param_ids[name] = node.id
        return node

    def constant(self, array, name: str = "") -> Node:
        return self._append(NodeRecord("const", (), _as_f64(array), name=name))

    def as_node(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("Node belongs to a different graph")
            return x
        return self.constant(x)

    # Records

    def record(self, op: str, inputs: Sequence[Node], forward_fn: Callable[..., Tensor],
               backward_fn: Optional[BackwardFn]) -> Node:
        """Evaluate forward_fn on the input values and append the result."""
        ids = tuple(node.id for node in inputs)
        values = [self.nodes[i].value for i in ids]
        value = self._evaluate(op, forward_fn, values)
        return self._append(NodeRecord(op, ids, value, forward_fn, backward_fn))

    def _append(self, rec: NodeRecord) -> Node:
        self.nodes.append(rec)
        return Node(self, len(self.nodes) - 1)

    def _evaluate(self, op: str, forward_fn, values) -> Tensor:
        try:
            with np.errstate(all="ignore"):
                value = _as_f64(forward_fn(*values))
        except ValueError as e:
            raise ShapeError(f"{op}: {e}") from e
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op} produced a non-finite value")
        return value

    # Passes

    def forward(self, overrides: Optional[Dict[Union[Node, int], Tensor]] = None) -> List[Tensor]:
        """
        Replay the tape in insertion order.

        Args:
            overrides: node (or id) -> value to use instead of the recorded
                leaf value or the recomputed op value

        Returns:
            List of node values indexed by node id. Stored values are untouched.
        """
        overrides = {(k.id if isinstance(k, Node) else k): _as_f64(v)
                     for k, v in (overrides or {}).items()}
        values: List[Tensor] = []
        for i, rec in enumerate(self.nodes):
            if i in overrides:
                if overrides[i].shape != rec.value.shape:
                    raise ShapeError(f"override for node {i} has shape {overrides[i].shape}, "
                                     f"expected {rec.value.shape}")
                values.append(overrides[i])
            elif rec.forward_fn is None:
                values.append(rec.value)
            else:
                values.append(self._evaluate(rec.op, rec.forward_fn,
                                             [values[j] for j in rec.inputs]))
        return values

    def backward(self, output: Node, taps: Iterable[Node] = ()) -> GradientMap:
        """
        Exact reverse-mode gradients of a scalar node.

        Args:
            output: 0-dimensional node
            taps: intermediate nodes whose adjoints should be returned

        Returns:
            GradientMap with every parameter and every tap (zeros if unreached)
        """
        taps = list(taps)
        for tap in taps:
            if tap.graph is not self or not 0 <= tap.id < len(self.nodes):
                raise KeyError(f"tap {tap!r} is not in this graph")
        out_rec = self.nodes[output.id]
        if out_rec.value.shape != ():
            raise ShapeError(f"backward needs a scalar output, got shape {out_rec.value.shape}")

        adjoints: List[Optional[Tensor]] = [None] * (output.id + 1)
        adjoints[output.id] = np.ones(())
        for i in range(output.id, -1, -1):
            g = adjoints[i]
            rec = self.nodes[i]
            if g is None or rec.backward_fn is None:
                continue
            in_values = [self.nodes[j].value for j in rec.inputs]
            with np.errstate(all="ignore"):
                in_grads = rec.backward_fn(g, *in_values, rec.value)
            for j, dj in zip(rec.inputs, in_grads):
                if dj is None:
                    continue
                dj = _unbroadcast(np.asarray(dj, dtype=np.float64), self.nodes[j].value.shape)
                adjoints[j] = dj if adjoints[j] is None else adjoints[j] + dj

        def _grad(i: int) -> Tensor:
            if i < len(adjoints) and adjoints[i] is not None:
                return adjoints[i]
            return np.zeros_like(self.nodes[i].value)

        result = GradientMap(names=dict(self._param_ids))
        for node_id in self._param_ids.values():
            result.grads[node_id] = _grad(node_id)
        for tap in taps:
            result.grads[tap.id] = _grad(tap.id)
        return result

    def parents_of(self, node: Node) -> set:
        """All node ids that node depends on (transitively)."""
        seen = set()
        stack = [node.id]
        while stack:
            i = stack.pop()
            for j in self.nodes[i].inputs:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return seen


def _as_f64(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum a broadcast gradient back to the operand's shape"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise ValueError("at least one operand must be a Node")


def _nodes(*xs) -> List[Node]:
    graph = _graph_of(*xs)
    return [graph.as_node(x) for x in xs]


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = _nodes(a, b)
    return a.graph.record("add", (a, b), np.add, lambda g, x, y, out: (g, g))


def sub(a, b) -> Node:
    a, b = _nodes(a, b)
    return a.graph.record("sub", (a, b), np.subtract, lambda g, x, y, out: (g, -g))


def mul(a, b) -> Node:
    a, b = _nodes(a, b)
    return a.graph.record("mul", (a, b), np.multiply, lambda g, x, y, out: (g * y, g * x))


def square(x: Node) -> Node:
    return x.graph.record("square", (x,), np.square, lambda g, a, out: (2.0 * a * g,))


def elu(x: Node) -> Node:
    """ELU with alpha = 1"""
    def fwd(a):
        return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))

    def bwd(g, a, out):
        return (g * np.where(a > 0, 1.0, out + 1.0),)

    return x.graph.record("elu", (x,), fwd, bwd)


def relu(x: Node) -> Node:
    return x.graph.record("relu", (x,), lambda a: np.maximum(a, 0.0),
                          lambda g, a, out: (g * (a > 0),))


def _sigmoid(a: Tensor) -> Tensor:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Node) -> Node:
    return x.graph.record("sigmoid", (x,), _sigmoid, lambda g, a, out: (g * out * (1.0 - out),))


def log_sigmoid(x: Node) -> Node:
    """log(sigmoid(x)) without overflow"""
    def fwd(a):
        return np.minimum(a, 0.0) - np.log1p(np.exp(-np.abs(a)))

    return x.graph.record("log_sigmoid", (x,), fwd, lambda g, a, out: (g * _sigmoid(-a),))


def tanh(x: Node) -> Node:
    return x.graph.record("tanh", (x,), np.tanh, lambda g, a, out: (g * (1.0 - out * out),))


def log(x: Node) -> Node:
    return x.graph.record("log", (x,), np.log, lambda g, a, out: (g / a,))


def exp(x: Node) -> Node:
    return x.graph.record("exp", (x,), np.exp, lambda g, a, out: (g * out,))


def stop_gradient(x: Node) -> Node:
    """Pass the value through, block the adjoint"""
    return x.graph.record("stop_gradient", (x,), lambda a: a, lambda g, a, out: (None,))


# ---------------------------------------------------------------------------
# Reductions and shape
# ---------------------------------------------------------------------------

def sum(x: Node, axis=None) -> Node:  # noqa: A001 - mirrors numpy
    def bwd(g, a, out):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return x.graph.record("sum", (x,), lambda a: np.sum(a, axis=axis), bwd)


def mean(x: Node, axis=None) -> Node:
    def fwd(a):
        return np.mean(a, axis=axis)

    def bwd(g, a, out):
        count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).copy(),)

    return x.graph.record("mean", (x,), fwd, bwd)


def reshape(x: Node, shape: Tuple[int, ...]) -> Node:
    return x.graph.record("reshape", (x,), lambda a: np.reshape(a, shape),
                          lambda g, a, out: (np.reshape(g, a.shape),))


def transpose(x: Node, axes: Optional[Tuple[int, ...]] = None) -> Node:
    inverse = None if axes is None else tuple(np.argsort(axes))
    return x.graph.record("transpose", (x,), lambda a: np.transpose(a, axes),
                          lambda g, a, out: (np.transpose(g, inverse),))


def stack(xs: Sequence[Node], axis: int = 0) -> Node:
    graph = xs[0].graph

    def bwd(g, *args):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return graph.record("stack", xs, lambda *vals: np.stack(vals, axis=axis), bwd)


def matmul(a, b) -> Node:
    """a (..., k) @ b (k, n); b must be rank 2"""
    a, b = _nodes(a, b)
    if b.value.ndim != 2 or a.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.value.shape} by {b.value.shape}")

    def bwd(g, x, y, out):
        dx = g @ y.T
        dy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return dx, dy

    return a.graph.record("matmul", (a, b), np.matmul, bwd)


# ---------------------------------------------------------------------------
# Distributions and lookups
# ---------------------------------------------------------------------------

def _log_softmax(a: Tensor) -> Tensor:
    shifted = a - a.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_with_temperature(logits: Node, temperature: float = 1.0) -> Node:
    """softmax(logits / temperature) over the last axis"""
    if temperature <= 0:
        raise ValueError("temperature must be positive")

    def fwd(a):
        return np.exp(_log_softmax(a / temperature))

    def bwd(g, a, out):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner) / temperature,)

    return logits.graph.record("softmax", (logits,), fwd, bwd)


def log_softmax_with_temperature(logits: Node, temperature: float = 1.0) -> Node:
    """log softmax(logits / temperature) over the last axis"""
    if temperature <= 0:
        raise ValueError("temperature must be positive")

    def fwd(a):
        return _log_softmax(a / temperature)

    def bwd(g, a, out):
        return ((g - np.exp(out) * g.sum(axis=-1, keepdims=True)) / temperature,)

    return logits.graph.record("log_softmax", (logits,), fwd, bwd)


def one_hot_gather(x: Node, ids) -> Node:
    """x[..., ids] along the last axis; ids has the shape of x minus its last axis"""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.value.shape[:-1]:
        raise ShapeError(f"one_hot_gather: ids {ids.shape} vs values {x.value.shape}")

    def fwd(a):
        return np.take_along_axis(a, ids[..., None], axis=-1)[..., 0]

    def bwd(g, a, out):
        da = np.zeros_like(a)
        np.put_along_axis(da, ids[..., None], g[..., None], axis=-1)
        return (da,)

    return x.graph.record("one_hot_gather", (x,), fwd, bwd)


def take_rows(table: Node, ids) -> Node:
    """Embedding lookup: table (V, d) indexed by integer ids of any shape"""
    ids = np.asarray(ids, dtype=np.int64)
    if table.value.ndim != 2:
        raise ShapeError("take_rows needs a rank-2 table")

    def bwd(g, w, out):
        dw = np.zeros_like(w)
        np.add.at(dw, ids, g)
        return (dw,)

    return table.graph.record("take_rows", (table,), lambda w: w[ids], bwd)


# ---------------------------------------------------------------------------
# Sequence layers
# ---------------------------------------------------------------------------

def same_padding(kernel: int) -> Tuple[int, int]:
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


def conv1d_same(x: Node, w: Node) -> Node:
    """
    Stride-1 same-padded convolution.

    Args:
        x: (N, T, C_in) features
        w: (C_out, C_in, k) kernel

    Returns:
        (N, T, C_out)
    """
    n, t, c_in = x.value.shape
    c_out, w_in, k = w.value.shape
    if w_in != c_in:
        raise ShapeError(f"conv1d_same: kernel expects {w_in} channels, input has {c_in}")
    left, right = same_padding(k)

    def windows(a):
        padded = np.pad(a, ((0, 0), (left, right), (0, 0)))
        return np.lib.stride_tricks.sliding_window_view(padded, k, axis=1)  # (N, T, C, k)

    def fwd(a, kernel):
        return np.einsum("ntck,ock->nto", windows(a), kernel)

    def bwd(g, a, kernel, out):
        dk = np.einsum("ntck,nto->ock", windows(a), g)
        dcols = np.einsum("nto,ock->ntck", g, kernel)
        dpad = np.zeros((n, t + k - 1, c_in))
        for j in range(k):
            dpad[:, j:j + t, :] += dcols[..., j]
        return dpad[:, left:left + t, :], dk

    return x.graph.record("conv1d_same", (x, w), fwd, bwd)


def pooled_lengths(lengths) -> np.ndarray:
    """Valid lengths after window-2 stride-2 ceil-mode pooling"""
    return (np.asarray(lengths, dtype=np.int64) + 1) // 2


def mean_pool(x: Node, lengths) -> Node:
    """
    Window 2, stride 2, ceil mode. Positions at or past a sequence's length
    are excluded from the average; windows with no valid position output 0.
    """
    n, t, c = x.value.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    t_out = (t + 1) // 2
    starts = 2 * np.arange(t_out)
    counts = np.clip(lengths[:, None] - starts[None, :], 0, 2).astype(np.float64)  # (N, T_out)
    valid = (np.arange(2 * t_out)[None, :] < lengths[:, None]).astype(np.float64)   # (N, 2*T_out)
    scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)

    def fwd(a):
        padded = np.pad(a, ((0, 0), (0, 2 * t_out - t), (0, 0))) * valid[..., None]
        return padded.reshape(n, t_out, 2, c).sum(axis=2) * scale[..., None]

    def bwd(g, a, out):
        spread = np.repeat(g * scale[..., None], 2, axis=1) * valid[..., None]
        return (spread[:, :t, :],)

    return x.graph.record("mean_pool", (x,), fwd, bwd)


def global_mean_pool(x: Node, lengths) -> Node:
    """(N, T, C) -> (N, C), averaging the first `length` positions of each row"""
    n, t, c = x.value.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    valid = (np.arange(t)[None, :] < lengths[:, None]).astype(np.float64)
    inv = 1.0 / np.maximum(lengths, 1).astype(np.float64)

    def fwd(a):
        return (a * valid[..., None]).sum(axis=1) * inv[:, None]

    def bwd(g, a, out):
        return ((g * inv[:, None])[:, None, :] * valid[..., None],)

    return x.graph.record("global_mean_pool", (x,), fwd, bwd)


def gru_cell(x: Node, h: Node, w: Dict[str, Node]) -> Node:
    """
    One GRU step composed from primitives.

    w holds w_z, w_r, w_h (d_in x d_h), u_z, u_r, u_h (d_h x d_h), b_z, b_r, b_h.
    """
    z = sigmoid(x @ w["w_z"] + h @ w["u_z"] + w["b_z"])
    r = sigmoid(x @ w["w_r"] + h @ w["u_r"] + w["b_r"])
    candidate = tanh(x @ w["w_h"] + (r * h) @ w["u_h"] + w["b_h"])
    return h + z * (candidate - h)


# ---------------------------------------------------------------------------
# Checking helpers
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[Tensor], float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central finite differences of a scalar function of one array"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = fn(x)
        flat[i] = orig - eps
        minus = fn(x)
        flat[i] = orig
        grad_flat[i] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(a: Tensor, b: Tensor, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor)"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)
