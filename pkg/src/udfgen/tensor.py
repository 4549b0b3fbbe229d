"""Minimal float64 computation graphs with reverse-mode differentiation.

Graphs are symbolic and immutable once built: node structure and shapes are
fixed at construction time, concrete values are supplied per evaluation call.
Parameter values live in a plain ``{name: ndarray}`` dict owned by the caller,
so optimizer steps never touch graph state and a frozen parameter snapshot can
be evaluated re-entrantly.

Conventions: every value is a C-contiguous float64 ndarray; broadcasting is
allowed only over the leading (batch) dimension, anything else needs an
explicit reshape.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

CHECKPOINT_MAGIC = b"UDFW"
LATENT_MAGIC = b"ZLAT"
CHECKPOINT_VERSION = 1


class GraphError(ValueError):
    """Graph construction or evaluation failure, tagged with the node."""

    def __init__(self, message: str, node: "Node | None" = None):
        if node is not None:
            message = f"{message} (node #{node.idx} op={node.op!r}" + (
                f" name={node.name!r})" if node.name else ")"
            )
        super().__init__(message)
        self.node = node


class OptimizerError(ValueError):
    pass


def as_tensor(value) -> Array:
    """Coerce to a C-contiguous float64 array (0-d shapes preserved)."""
    arr = np.asarray(value, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


@dataclass(frozen=True, eq=False)
class Node:
    """One operation in a graph; ``inputs`` index earlier nodes only."""

    idx: int
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    name: str | None = None
    attrs: tuple = ()

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node({self.idx}, {self.op}{tag}, shape={self.shape})"


def _can_broadcast(target: tuple[int, ...], other: tuple[int, ...]) -> bool:
    # leading-batch broadcast only: (n,)+rest accepts rest or (1,)+rest
    if other == target:
        return True
    if len(target) >= 1 and other == target[1:]:
        return True
    if len(target) >= 1 and other == (1,) + target[1:]:
        return True
    return False


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    summed = grad.sum(axis=0)
    return summed.reshape(shape)


class Graph:
    """An acyclic op graph; builder methods append nodes in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._by_name: dict[str, Node] = {}
        self._consts: dict[int, Array] = {}

    # -- construction -----------------------------------------------------

    def _append(self, op, inputs, shape, name=None, attrs=()) -> Node:
        node = Node(len(self.nodes), op, tuple(n.idx for n in inputs), tuple(shape), name, attrs)
        self.nodes.append(node)
        return node

    def _named(self, op, name, shape) -> Node:
        if name in self._by_name:
            raise GraphError(f"duplicate graph binding name {name!r}")
        node = self._append(op, (), shape, name=name)
        self._by_name[name] = node
        return node

    def input(self, name: str, shape) -> Node:
        return self._named("input", name, shape)

    def parameter(self, name: str, shape) -> Node:
        return self._named("param", name, shape)

    def constant(self, value) -> Node:
        arr = as_tensor(value)
        node = self._append("const", (), arr.shape)
        self._consts[node.idx] = arr
        return node

    @property
    def parameters(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "param"]

    # -- elementwise / arithmetic ------------------------------------------

    def _binary(self, op, a: Node, b: Node) -> Node:
        if not _can_broadcast(a.shape, b.shape):
            raise GraphError(f"shape mismatch {a.shape} vs {b.shape} for {op}", a)
        return self._append(op, (a, b), a.shape)

    def add(self, a, b):
        return self._binary("add", a, b)

    def sub(self, a, b):
        return self._binary("sub", a, b)

    def mul(self, a, b):
        return self._binary("mul", a, b)

    def neg(self, a: Node) -> Node:
        return self._append("neg", (a,), a.shape)

    def scale(self, a: Node, factor: float) -> Node:
        return self._append("scale", (a,), a.shape, attrs=(float(factor),))

    def relu(self, a: Node) -> Node:
        return self._append("relu", (a,), a.shape)

    def sigmoid(self, a: Node) -> Node:
        return self._append("sigmoid", (a,), a.shape)

    def log(self, a: Node) -> Node:
        return self._append("log", (a,), a.shape)

    def clip(self, a: Node, lo: float, hi: float) -> Node:
        return self._append("clip", (a,), a.shape, attrs=(float(lo), float(hi)))

    def softmax(self, a: Node, axis: int = -1) -> Node:
        return self._append("softmax", (a,), a.shape, attrs=(axis,))

    # -- linear algebra -----------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise GraphError(f"matmul needs (m,k)@(k,n), got {a.shape} @ {b.shape}", a)
        return self._append("matmul", (a, b), (a.shape[0], b.shape[1]))

    def transpose(self, a: Node) -> Node:
        if len(a.shape) != 2:
            raise GraphError(f"transpose needs a 2-d node, got {a.shape}", a)
        return self._append("transpose", (a,), (a.shape[1], a.shape[0]))

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, a: Node, shape) -> Node:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=np.int64)) != int(np.prod(a.shape, dtype=np.int64)):
            raise GraphError(f"cannot reshape {a.shape} to {shape}", a)
        return self._append("reshape", (a,), shape)

    def broadcast(self, a: Node, shape) -> Node:
        shape = tuple(int(s) for s in shape)
        if not _can_broadcast(shape, a.shape):
            raise GraphError(f"cannot broadcast {a.shape} to {shape}", a)
        return self._append("broadcast", (a,), shape)

    def concat(self, parts: list[Node], axis: int = 0) -> Node:
        if not parts:
            raise GraphError("concat of zero nodes")
        axis = axis % len(parts[0].shape)
        base = parts[0].shape
        for p in parts[1:]:
            if len(p.shape) != len(base) or any(
                e != b for i, (e, b) in enumerate(zip(p.shape, base)) if i != axis
            ):
                raise GraphError(f"concat shape mismatch {base} vs {p.shape}", p)
        out = list(base)
        out[axis] = sum(p.shape[axis] for p in parts)
        return self._append("concat", tuple(parts), out, attrs=(axis,))

    def slice(self, a: Node, axis: int, start: int, stop: int) -> Node:
        axis = axis % len(a.shape)
        if not (0 <= start < stop <= a.shape[axis]):
            raise GraphError(f"slice [{start}:{stop}] out of range for {a.shape}", a)
        out = list(a.shape)
        out[axis] = stop - start
        return self._append("slice", (a,), out, attrs=(axis, start, stop))

    def gather(self, a: Node, indices: Node) -> Node:
        # rows of `a` selected by the (float-encoded integer) values of `indices`
        if len(indices.shape) != 1:
            raise GraphError("gather indices must be 1-d", indices)
        return self._append("gather", (a, indices), (indices.shape[0],) + a.shape[1:])

    # -- reductions ------------------------------------------------------------

    def max_reduce(self, a: Node, axis: int, keepdims: bool = False) -> Node:
        axis = axis % len(a.shape)
        out = list(a.shape)
        if keepdims:
            out[axis] = 1
        else:
            out.pop(axis)
        return self._append("max", (a,), out, attrs=(axis, keepdims))

    def sum_reduce(self, a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
        if axis is None:
            out = () if not keepdims else (1,) * len(a.shape)
            return self._append("sum", (a,), out, attrs=(None, keepdims))
        axis = axis % len(a.shape)
        out = list(a.shape)
        if keepdims:
            out[axis] = 1
        else:
            out.pop(axis)
        return self._append("sum", (a,), out, attrs=(axis, keepdims))

    def mean(self, a: Node) -> Node:
        return self._append("mean", (a,), ())


# ---------------------------------------------------------------------------
# forward evaluation


def _softmax(x: Array, axis: int) -> Array:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _forward_op(node: Node, vals: list[Array], graph: Graph) -> Array:
    op = node.op
    a = vals[node.inputs[0]] if node.inputs else None
    if op == "add":
        return a + vals[node.inputs[1]]
    if op == "sub":
        return a - vals[node.inputs[1]]
    if op == "mul":
        return a * vals[node.inputs[1]]
    if op == "neg":
        return -a
    if op == "scale":
        return a * node.attrs[0]
    if op == "matmul":
        return a @ vals[node.inputs[1]]
    if op == "transpose":
        return np.ascontiguousarray(a.T)
    if op == "relu":
        return np.maximum(a, 0.0)
    if op == "sigmoid":
        # exp() only ever sees non-positive arguments, so it cannot overflow
        e = np.exp(-np.abs(a))
        return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    if op == "log":
        return np.log(a)
    if op == "clip":
        return np.clip(a, node.attrs[0], node.attrs[1])
    if op == "softmax":
        return _softmax(a, node.attrs[0])
    if op == "reshape":
        return a.reshape(node.shape)
    if op == "broadcast":
        return np.broadcast_to(a, node.shape).copy()
    if op == "concat":
        return np.concatenate([vals[i] for i in node.inputs], axis=node.attrs[0])
    if op == "slice":
        axis, start, stop = node.attrs
        key = [np.s_[:]] * len(a.shape)
        key[axis] = np.s_[start:stop]
        return np.ascontiguousarray(a[tuple(key)])
    if op == "gather":
        idx = np.rint(vals[node.inputs[1]]).astype(np.int64)
        return a[idx]
    if op == "max":
        axis, keepdims = node.attrs
        return a.max(axis=axis, keepdims=keepdims)
    if op == "sum":
        axis, keepdims = node.attrs
        return a.sum(axis=axis, keepdims=keepdims)
    if op == "mean":
        return np.asarray(a.mean())
    raise GraphError(f"unknown op {op!r}", node)


class Forward:
    """Per-node values of one evaluation; indexable by Node."""

    def __init__(self, graph: Graph, values: list[Array]):
        self.graph = graph
        self.values = values

    def __getitem__(self, node: Node) -> Array:
        return self.values[node.idx]


def evaluate(
    graph: Graph,
    inputs: dict[str, Array] | None = None,
    params: dict[str, Array] | None = None,
    validate: bool = True,
) -> Forward:
    """Run the graph forward on the given named bindings.

    Pure: repeated calls with identical bindings give bit-identical results.
    With ``validate`` every node's output is checked finite; training loops
    turn this off and check the loss scalar instead.
    """
    inputs = inputs or {}
    params = params or {}
    values: list[Array] = [None] * len(graph.nodes)  # type: ignore[list-item]
    for node in graph.nodes:
        if node.op == "input" or node.op == "param":
            source = inputs if node.op == "input" else params
            if node.name not in source:
                raise GraphError(f"missing binding for {node.op}", node)
            arr = as_tensor(source[node.name])
            if arr.shape != node.shape:
                raise GraphError(f"bound shape {arr.shape} != declared {node.shape}", node)
            values[node.idx] = arr
        elif node.op == "const":
            values[node.idx] = graph._consts[node.idx]
        else:
            values[node.idx] = _forward_op(node, values, graph)
        if validate and not np.all(np.isfinite(values[node.idx])):
            raise GraphError("non-finite output", node)
    return Forward(graph, values)


# ---------------------------------------------------------------------------
# reverse-mode differentiation


def _first_max_mask(a: Array, axis: int) -> Array:
    # route gradient to the first maximal element along axis (deterministic ties)
    hit = a == a.max(axis=axis, keepdims=True)
    first = np.cumsum(hit, axis=axis) == 1
    return (hit & first).astype(np.float64)


def _backward_op(node: Node, grad: Array, vals: list[Array]) -> list[Array | None]:
    op = node.op
    ins = node.inputs
    a = vals[ins[0]] if ins else None
    if op == "add":
        return [grad, _unbroadcast(grad, vals[ins[1]].shape)]
    if op == "sub":
        return [grad, -_unbroadcast(grad, vals[ins[1]].shape)]
    if op == "mul":
        b = vals[ins[1]]
        return [grad * b, _unbroadcast(grad * a, b.shape)]
    if op == "neg":
        return [-grad]
    if op == "scale":
        return [grad * node.attrs[0]]
    if op == "matmul":
        b = vals[ins[1]]
        return [grad @ b.T, a.T @ grad]
    if op == "transpose":
        return [np.ascontiguousarray(grad.T)]
    if op == "relu":
        return [grad * (a > 0)]
    if op == "sigmoid":
        s = vals[node.idx]
        return [grad * s * (1.0 - s)]
    if op == "log":
        return [grad / a]
    if op == "clip":
        lo, hi = node.attrs
        return [grad * ((a > lo) & (a < hi))]
    if op == "softmax":
        axis = node.attrs[0]
        s = vals[node.idx]
        return [s * (grad - (grad * s).sum(axis=axis, keepdims=True))]
    if op == "reshape":
        return [grad.reshape(a.shape)]
    if op == "broadcast":
        return [_unbroadcast(grad, a.shape)]
    if op == "concat":
        axis = node.attrs[0]
        out, offset = [], 0
        for i in ins:
            extent = vals[i].shape[axis]
            key = [np.s_[:]] * grad.ndim
            key[axis] = np.s_[offset : offset + extent]
            out.append(np.ascontiguousarray(grad[tuple(key)]))
            offset += extent
        return out
    if op == "slice":
        axis, start, stop = node.attrs
        g = np.zeros_like(a)
        key = [np.s_[:]] * a.ndim
        key[axis] = np.s_[start:stop]
        g[tuple(key)] = grad
        return [g]
    if op == "gather":
        idx = np.rint(vals[ins[1]]).astype(np.int64)
        g = np.zeros_like(a)
        np.add.at(g, idx, grad)
        return [g, None]
    if op == "max":
        axis, keepdims = node.attrs
        g = grad if keepdims else np.expand_dims(grad, axis)
        return [_first_max_mask(a, axis) * g]
    if op == "sum":
        axis, keepdims = node.attrs
        if axis is None:
            return [np.broadcast_to(grad.reshape((1,) * a.ndim), a.shape).copy()]
        g = grad if keepdims else np.expand_dims(grad, axis)
        return [np.broadcast_to(g, a.shape).copy()]
    if op == "mean":
        return [np.full(a.shape, float(grad) / a.size)]
    raise GraphError(f"no gradient rule for op {op!r}", node)


def backpropagate(graph: Graph, loss: Node, forward: Forward) -> dict[str, Array]:
    """Gradients of a scalar loss node with respect to every parameter.

    Parameters not reachable from the loss get zero gradients.  The graph and
    forward values are left untouched.
    """
    if loss.shape != ():
        raise GraphError(f"loss must be scalar, got shape {loss.shape}", loss)
    vals = forward.values

    needed = np.zeros(len(graph.nodes), dtype=bool)
    needed[loss.idx] = True
    for node in reversed(graph.nodes[: loss.idx + 1]):
        if needed[node.idx]:
            for i in node.inputs:
                needed[i] = True

    grads: list[Array | None] = [None] * len(graph.nodes)
    grads[loss.idx] = np.asarray(1.0)
    for node in reversed(graph.nodes[: loss.idx + 1]):
        g = grads[node.idx]
        if g is None or not needed[node.idx] or not node.inputs:
            continue
        for i, gi in zip(node.inputs, _backward_op(node, g, vals)):
            if gi is None:
                continue
            grads[i] = gi if grads[i] is None else grads[i] + gi

    out: dict[str, Array] = {}
    for p in graph.parameters:
        g = grads[p.idx]
        out[p.name] = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
    return out


def gradient_check(
    graph: Graph,
    loss: Node,
    inputs: dict[str, Array],
    params: dict[str, Array],
    step: float = 1e-5,
) -> float:
    """Max relative error between autodiff and central finite differences.

    Error metric per element is |g_ad - g_fd| / max(1, |g_fd|); returns the
    max over every element of every parameter (0.0 for parameterless graphs).
    """
    if not 0 < step <= 1e-3:
        raise ValueError(f"step must be in (0, 1e-3], got {step}")
    fwd = evaluate(graph, inputs, params)
    analytic = backpropagate(graph, loss, fwd)

    worst = 0.0
    for node in graph.parameters:
        base = as_tensor(params[node.name]).copy()
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = float(evaluate(graph, inputs, {**params, node.name: base})[loss])
            flat[j] = orig - step
            lo = float(evaluate(graph, inputs, {**params, node.name: base})[loss])
            flat[j] = orig
            fd = (hi - lo) / (2.0 * step)
            ad = analytic[node.name].reshape(-1)[j]
            worst = max(worst, abs(ad - fd) / max(1.0, abs(fd)))
    return worst


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Adam optimizer state; moment buffers are created lazily per parameter."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_update(state: AdamState, params: dict[str, Array], grads: dict[str, Array]) -> None:
    """One in-place Adam step with bias correction over all named parameters."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 version, u32 count, then per tensor
# u32 name length + utf-8 name, u32 rank, u32 extents, little-endian f64 payload


def save_checkpoint(path, tensors: dict[str, Array], magic: bytes = CHECKPOINT_MAGIC) -> None:
    names = sorted(tensors)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            arr = as_tensor(tensors[name])
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path, magic: bytes = CHECKPOINT_MAGIC) -> dict[str, Array]:
    with open(path, "rb") as f:
        got = f.read(4)
        if got != magic:
            raise ValueError(f"bad magic {got!r}, expected {magic!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out: dict[str, Array] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64)
    return out
