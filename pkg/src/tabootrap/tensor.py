"""Dense tensor operators with tape-based reverse-mode differentiation.

Tensors are plain numpy arrays (float32 unless the caller hands in another
floating dtype, which the gradient checks use).  A :class:`Graph` records
every primitive as it is evaluated, so the forward pass happens eagerly and
:func:`backward` walks the tape in reverse.

    g = Graph()
    x = g.input(images)
    w = g.param(weight, "fc.weight")
    b = g.param(bias, "fc.bias")
    loss = softmax_cross_entropy(linear(x, w, b), labels)
    grads = backward(g, loss)
    grads[x.id]          # dLoss/dx
    grads.by_name()      # {"fc.weight": ..., "fc.bias": ...}

A graph is built per batch and thrown away; forward values are never
mutated after they are recorded.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand extents are incompatible with the operator."""


class GraphError(RuntimeError):
    """The graph cannot be differentiated as requested."""


class Node:
    __slots__ = (
        "graph",
        "id",
        "kind",
        "value",
        "parents",
        "backward_fn",
        "trainable",
        "is_input",
        "requires_grad",
        "name",
    )

    def __init__(self, graph, node_id, kind, value, parents, backward_fn):
        self.graph = graph
        self.id = node_id
        self.kind = kind
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.trainable = False
        self.is_input = False
        self.requires_grad = any(p.requires_grad for p in self.parents)
        self.name = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, kind={self.kind!r}, shape={self.shape})"


class Graph:
    """Tape of evaluated primitives, in topological (creation) order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def record(
        self,
        kind: str,
        value: np.ndarray,
        parents: Sequence[Node] = (),
        backward_fn: Callable | None = None,
    ) -> Node:
        """Append an evaluated operation.

        ``backward_fn(grad_out)`` must return one gradient (or ``None``) per
        parent, in parent order.
        """
        for p in parents:
            if p.graph is not self:
                raise GraphError(f"operand {p!r} belongs to a different graph")
        node = Node(self, len(self.nodes), kind, value, parents, backward_fn)
        self.nodes.append(node)
        return node

    def param(self, value, name: str | None = None) -> Node:
        node = self.record("param", _as_tensor(value))
        node.trainable = True
        node.requires_grad = True
        node.name = name
        return node

    def input(self, value, requires_grad: bool = True, name: str | None = None) -> Node:
        node = self.record("input", _as_tensor(value))
        node.is_input = requires_grad
        node.requires_grad = requires_grad
        node.name = name
        return node

    def constant(self, value) -> Node:
        return self.record("const", _as_tensor(value))

    @property
    def parameters(self) -> list[Node]:
        return [n for n in self.nodes if n.trainable]

    @property
    def inputs(self) -> list[Node]:
        return [n for n in self.nodes if n.is_input]


class GradientMap(dict):
    """Node id -> dLoss/dnode, with the shape of the node's forward value."""

    def __init__(self, graph: Graph, grads: dict[int, np.ndarray]):
        super().__init__(grads)
        self.graph = graph

    def of(self, node: Node) -> np.ndarray:
        return self[node.id]

    def by_name(self) -> dict[str, np.ndarray]:
        return {n.name: self[n.id] for n in self.graph.parameters}


def _as_tensor(value) -> np.ndarray:
    arr = np.asarray(value)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DTYPE)
    return arr


def backward(graph: Graph, loss: Node) -> GradientMap:
    """Reverse-mode sweep from a scalar ``loss``.

    Every trainable parameter and flagged input gets an entry; the ones the
    loss does not depend on get zeros.
    """
    if loss.graph is not graph:
        raise GraphError("loss node does not belong to this graph")
    if loss.value is None:
        raise GraphError("forward pass has not been executed for the loss node")
    if loss.value.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.value.shape}")

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for node in reversed(graph.nodes[: loss.id + 1]):
        g = grads.get(node.id)
        if g is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.value.shape:
                raise GraphError(
                    f"{node.kind} produced gradient of shape {pg.shape} "
                    f"for operand of shape {parent.value.shape}"
                )
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg

    out = {}
    for node in graph.nodes:
        if node.trainable or node.is_input:
            g = grads.get(node.id)
            out[node.id] = np.zeros_like(node.value) if g is None else g
    return GradientMap(graph, out)


# ---------------------------------------------------------------------------
# primitives


def conv2d(x: Node, weight: Node, bias: Node, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation of an NCHW batch with a (C_out, C_in, k, k) kernel."""
    if x.value.ndim != 4 or weight.value.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}"
        )
    n, c_in, h, w = x.shape
    c_out, c_w, kh, kw = weight.shape
    if c_w != c_in:
        raise ShapeError(f"conv2d channel mismatch: input C_in={c_in}, weight C_in={c_w}")
    if kh != kw:
        raise ShapeError(f"conv2d needs a square kernel, got {kh}x{kw}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match C_out={c_out}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    k = kh
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ShapeError(f"kernel {k}x{k} larger than padded input {hp}x{wp}")
    if (hp - k) % stride or (wp - k) % stride:
        raise ShapeError(
            f"conv2d output extent not integral: ({hp}-{k})/{stride}, ({wp}-{k})/{stride}"
        )
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    xp = x.value
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * k * k)
    wmat = weight.value.reshape(c_out, -1)
    out = cols @ wmat.T + bias.value
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c_in, k, k)
            gxp = np.zeros((n, c_in, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    return x.graph.record("conv2d", np.ascontiguousarray(out), (x, weight, bias), back)


def linear(x: Node, weight: Node, bias: Node) -> Node:
    if x.value.ndim != 2 or weight.value.ndim != 2:
        raise ShapeError(f"linear expects 2-D operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear inner dimension mismatch: input F_in={x.shape[1]}, weight F_in={weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} does not match F_out={weight.shape[0]}")
    out = x.value @ weight.value.T + bias.value

    def back(g):
        gx = g @ weight.value if x.requires_grad else None
        gw = g.T @ x.value if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return x.graph.record("linear", out, (x, weight, bias), back)


def relu(x: Node) -> Node:
    mask = x.value > 0
    out = np.maximum(x.value, 0).astype(x.value.dtype)  # NaN propagates, unlike a masked copy

    def back(g):
        return (g * mask,)

    return x.graph.record("relu", out, (x,), back)


def maxpool2d(x: Node, k: int, stride: int | None = None) -> Node:
    """Windowed max; ties route the gradient to the first row-major maximum."""
    stride = k if stride is None else stride
    if x.value.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    if k < 1 or stride < 1:
        raise ShapeError(f"invalid pool window k={k} stride={stride}")
    n, c, h, w = x.shape
    if k > h or k > w or (h - k) % stride or (w - k) % stride:
        raise ShapeError(
            f"maxpool2d output extent not integral for {h}x{w} with k={k}, stride={stride}"
        )
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    windows = sliding_window_view(x.value, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    ni, ci, oi, oj = np.indices((n, c, ho, wo), sparse=True)
    rows = oi * stride + idx // k
    cols = oj * stride + idx % k

    def back(g):
        gx = np.zeros_like(x.value, dtype=g.dtype)
        if k > stride:
            np.add.at(gx, (ni, ci, rows, cols), g)
        else:
            gx[ni, ci, rows, cols] = g
        return (gx,)

    return x.graph.record("maxpool2d", np.ascontiguousarray(out), (x,), back)


def flatten(x: Node) -> Node:
    shape = x.shape

    def back(g):
        return (g.reshape(shape),)

    return x.graph.record("flatten", x.value.reshape(shape[0], -1), (x,), back)


def softmax_cross_entropy(logits: Node, labels, reduction: str = "mean") -> Node:
    """Batch cross-entropy of integer labels, stabilised by max-subtraction.

    The reduction runs in float64 and the result is cast back to the logits'
    dtype.
    """
    if logits.value.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    z = logits.value.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    per_sample = lse - z[rows, labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    total = per_sample.sum() * scale
    dtype = logits.value.dtype

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return ((p * (scale * float(g))).astype(dtype),)

    return logits.graph.record(
        "softmax_cross_entropy", np.asarray(total, dtype=dtype), (logits,), back
    )


def sum_(x: Node) -> Node:
    dtype = x.value.dtype
    total = np.asarray(x.value.sum(dtype=np.float64), dtype=dtype)

    def back(g):
        return (np.full(x.shape, g, dtype=dtype),)

    return x.graph.record("sum", total, (x,), back)


def weighted_sum(x: Node, weights) -> Node:
    """Scalar ``sum(x * weights)`` for a constant weight array."""
    weights = np.asarray(weights, dtype=x.value.dtype)
    if weights.shape != x.shape:
        raise ShapeError(f"weights shape {weights.shape} does not match {x.shape}")
    total = np.asarray((x.value.astype(np.float64) * weights).sum(), dtype=x.value.dtype)

    def back(g):
        return (weights * g,)

    return x.graph.record("weighted_sum", total, (x,), back)


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ in shape: {a.shape} vs {b.shape}")

    def back(g):
        return g, g

    return a.graph.record("add", a.value + b.value, (a, b), back)


def scale(x: Node, factor: float) -> Node:
    dtype = x.value.dtype

    def back(g):
        return ((g * factor).astype(dtype),)

    return x.graph.record("scale", (x.value * factor).astype(dtype), (x,), back)


def shift(x: Node, offset) -> Node:
    """``x + offset`` for a constant offset broadcastable to x."""
    offset = np.asarray(offset, dtype=x.value.dtype)

    def back(g):
        return (g,)

    return x.graph.record("shift", x.value + offset, (x,), back)


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    velocity: dict[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Heavy-ball SGD: ``v <- momentum*v + g``; ``p <- p - lr*v``.

    Returns fresh ``(params, velocity)`` dicts; inputs are not modified.
    """
    if lr < 0 or momentum < 0:
        raise ValueError(f"lr and momentum must be non-negative, got {lr}, {momentum}")
    velocity = velocity or {}
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"no gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        v = g if name not in velocity else momentum * velocity[name] + g
        v = v.astype(p.dtype, copy=False)
        new_velocity[name] = v
        new_params[name] = p if lr == 0 else (p - lr * v).astype(p.dtype, copy=False)
    return new_params, new_velocity
