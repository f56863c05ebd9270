"""Minimal reverse-mode autodiff over dense float64 matrices.

Every tensor the training stack touches is a :class:`Value`: one node of a
:class:`Graph` holding a rows-by-cols matrix, a gradient slot of the same
shape, and the bookkeeping needed to replay the chain rule in reverse
creation order.  Scalars are 1x1 matrices, row vectors are 1xn.  Everything
is float64 -- finite-difference tolerances would be meaningless at single
precision.

The primitive set is deliberately small: just enough for a mean-pooled
encoder, MLP heads, cosine-similarity matrices and the contrastive /
cross-entropy losses built on top.  Two fused nodes (`softmax-xent`,
`log1p-sum-exp`) exist purely so the softmax-style reductions can be
stabilized by max-subtraction; they share the node machinery but are not
part of the generic :func:`apply_primitive` surface.

Accumulation order is deterministic (reverse creation order, parents
visited left to right), so repeated runs are bit-identical given a seed.
A single graph is owned by one logical thread; independent graphs are
independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRIMITIVE_KINDS = frozenset({
    "matmul", "add", "sub", "elementwise-mul", "scale", "exp", "log", "abs",
    "sum", "mean", "concat-cols", "transpose", "row-l2-normalize",
    "stop-gradient",
})


def _as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Value:
    """One graph node: a dense float64 matrix plus its gradient slot.

    `grad` stays None until :func:`backward` reaches the node.  Node ids are
    assigned in creation order, which is a topological order of the graph by
    construction (parents always precede children).
    """

    __slots__ = ("graph", "nid", "kind", "data", "grad", "requires_grad",
                 "parents", "attrs")

    def __init__(self, graph, nid, kind, data, parents, requires_grad, attrs):
        self.graph = graph
        self.nid = nid
        self.kind = kind
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.attrs = attrs

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ValueError(f"item() needs a scalar node, got shape {self.data.shape}")
        return float(self.data[0, 0])

    def _lift(self, other) -> "Value":
        if isinstance(other, Value):
            return other
        return self.graph.leaf(other)

    def __matmul__(self, other):
        return apply_primitive(self.graph, "matmul", [self, self._lift(other)])

    def __add__(self, other):
        return apply_primitive(self.graph, "add", [self, self._lift(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return apply_primitive(self.graph, "sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        return apply_primitive(self.graph, "elementwise-mul", [self, other])

    __rmul__ = __mul__

    def __neg__(self):
        return self.scale(-1.0)

    def scale(self, factor: float):
        return apply_primitive(self.graph, "scale", [self], {"factor": float(factor)})

    def exp(self):
        return apply_primitive(self.graph, "exp", [self])

    def log(self):
        return apply_primitive(self.graph, "log", [self])

    def abs(self):
        return apply_primitive(self.graph, "abs", [self])

    def sum(self):
        return apply_primitive(self.graph, "sum", [self])

    def mean(self):
        return apply_primitive(self.graph, "mean", [self])

    def transpose(self):
        return apply_primitive(self.graph, "transpose", [self])

    T = property(transpose)

    def __repr__(self):
        return f"Value(nid={self.nid}, kind={self.kind!r}, shape={self.data.shape})"


class Graph:
    """Append-only node list; parents always precede their children."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Value] = []

    def leaf(self, data, requires_grad: bool = False) -> Value:
        arr = _as_matrix(data)
        if not np.all(np.isfinite(arr)):
            raise ValueError("leaf data must be finite")
        return self._node("leaf", arr, (), requires_grad, None)

    def _node(self, kind, data, parents, requires_grad, attrs) -> Value:
        node = Value(self, len(self.nodes), kind, data, parents, requires_grad, attrs)
        self.nodes.append(node)
        return node


def apply_primitive(graph: Graph, kind: str, inputs: list[Value], attrs: dict | None = None) -> Value:
    """Append one primitive node, computing its forward value immediately.

    `kind` must be one of PRIMITIVE_KINDS; inputs must live in `graph` and
    have shapes conforming to the kind.  Binary elementwise kinds (add, sub,
    elementwise-mul) accept a second operand that is either the same shape,
    a 1x1 scalar, or a 1xn row vector broadcast over the rows of the first.
    """
    if kind not in PRIMITIVE_KINDS:
        raise ValueError(f"unknown primitive kind {kind!r}")
    if not inputs:
        raise ValueError(f"{kind} needs at least one input")
    for v in inputs:
        if v.graph is not graph:
            raise ValueError("all inputs must belong to the target graph")
    data, attrs = _FORWARD[kind](inputs, attrs or {})
    requires_grad = kind != "stop-gradient" and any(v.requires_grad for v in inputs)
    return graph._node(kind, data, tuple(inputs), requires_grad, attrs)


def _shape_error(kind, *shapes):
    described = " vs ".join(str(s) for s in shapes)
    return ValueError(f"{kind}: shape mismatch {described}")


def _binary_data(kind, inputs):
    if len(inputs) != 2:
        raise ValueError(f"{kind} takes exactly 2 inputs, got {len(inputs)}")
    a, b = inputs[0].data, inputs[1].data
    if b.shape != a.shape and b.shape != (1, 1) and b.shape != (1, a.shape[1]):
        raise _shape_error(kind, a.shape, b.shape)
    return a, b


def _unary_data(kind, inputs):
    if len(inputs) != 1:
        raise ValueError(f"{kind} takes exactly 1 input, got {len(inputs)}")
    return inputs[0].data


def _reduce_to(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum the gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    return g.sum(axis=0, keepdims=True)


def _f_matmul(inputs, attrs):
    if len(inputs) != 2:
        raise ValueError(f"matmul takes exactly 2 inputs, got {len(inputs)}")
    a, b = inputs[0].data, inputs[1].data
    if a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    return a @ b, None


def _f_add(inputs, attrs):
    a, b = _binary_data("add", inputs)
    return a + b, None


def _f_sub(inputs, attrs):
    a, b = _binary_data("sub", inputs)
    return a - b, None


def _f_emul(inputs, attrs):
    a, b = _binary_data("elementwise-mul", inputs)
    return a * b, None


def _f_scale(inputs, attrs):
    a = _unary_data("scale", inputs)
    factor = attrs.get("factor")
    if factor is None or not np.isfinite(factor):
        raise ValueError("scale needs a finite 'factor' attribute")
    return a * factor, {"factor": float(factor)}


def _f_exp(inputs, attrs):
    return np.exp(_unary_data("exp", inputs)), None


def _f_log(inputs, attrs):
    a = _unary_data("log", inputs)
    if np.any(a <= 0.0):
        raise ValueError(f"log of non-positive entry (min = {a.min()})")
    return np.log(a), None


def _f_abs(inputs, attrs):
    return np.abs(_unary_data("abs", inputs)), None


def _f_sum(inputs, attrs):
    return _unary_data("sum", inputs).sum().reshape(1, 1), None


def _f_mean(inputs, attrs):
    return _unary_data("mean", inputs).mean().reshape(1, 1), None


def _f_concat(inputs, attrs):
    rows = inputs[0].data.shape[0]
    for v in inputs[1:]:
        if v.data.shape[0] != rows:
            raise _shape_error("concat-cols", inputs[0].data.shape, v.data.shape)
    return np.concatenate([v.data for v in inputs], axis=1), None


def _f_transpose(inputs, attrs):
    return np.ascontiguousarray(_unary_data("transpose", inputs).T), None


def _f_rownorm(inputs, attrs):
    a = _unary_data("row-l2-normalize", inputs)
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    zero = np.flatnonzero(norms[:, 0] == 0.0)
    if zero.size:
        raise ValueError(f"row-l2-normalize: row {zero[0]} has zero norm")
    return a / norms, {"norms": norms}


def _f_stopgrad(inputs, attrs):
    return _unary_data("stop-gradient", inputs), None


_FORWARD = {
    "matmul": _f_matmul,
    "add": _f_add,
    "sub": _f_sub,
    "elementwise-mul": _f_emul,
    "scale": _f_scale,
    "exp": _f_exp,
    "log": _f_log,
    "abs": _f_abs,
    "sum": _f_sum,
    "mean": _f_mean,
    "concat-cols": _f_concat,
    "transpose": _f_transpose,
    "row-l2-normalize": _f_rownorm,
    "stop-gradient": _f_stopgrad,
}


def _acc(parent: Value, g: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = np.zeros_like(parent.data)
    parent.grad += g


def _b_matmul(node):
    a, b = node.parents
    _acc(a, node.grad @ b.data.T)
    _acc(b, a.data.T @ node.grad)


def _b_add(node):
    a, b = node.parents
    _acc(a, node.grad)
    _acc(b, _reduce_to(node.grad, b.data.shape))


def _b_sub(node):
    a, b = node.parents
    _acc(a, node.grad)
    _acc(b, -_reduce_to(node.grad, b.data.shape))


def _b_emul(node):
    a, b = node.parents
    _acc(a, node.grad * b.data)
    _acc(b, _reduce_to(node.grad * a.data, b.data.shape))


def _b_scale(node):
    _acc(node.parents[0], node.grad * node.attrs["factor"])


def _b_exp(node):
    _acc(node.parents[0], node.grad * node.data)


def _b_log(node):
    _acc(node.parents[0], node.grad / node.parents[0].data)


def _b_abs(node):
    _acc(node.parents[0], node.grad * np.sign(node.parents[0].data))


def _b_sum(node):
    a = node.parents[0]
    _acc(a, np.full_like(a.data, node.grad[0, 0]))


def _b_mean(node):
    a = node.parents[0]
    _acc(a, np.full_like(a.data, node.grad[0, 0] / a.data.size))


def _b_concat(node):
    offset = 0
    for parent in node.parents:
        width = parent.data.shape[1]
        _acc(parent, node.grad[:, offset:offset + width])
        offset += width


def _b_transpose(node):
    _acc(node.parents[0], node.grad.T)


def _b_rownorm(node):
    a = node.parents[0]
    y = node.data
    dots = np.sum(node.grad * y, axis=1, keepdims=True)
    _acc(a, (node.grad - dots * y) / node.attrs["norms"])


def _b_stopgrad(node):
    pass


def _b_softmax_xent(node):
    logits = node.parents[0]
    probs = node.attrs["probs"]
    targets = node.attrs["targets"]
    n = probs.shape[0]
    delta = probs.copy()
    delta[np.arange(n), targets] -= 1.0
    _acc(logits, node.grad[0, 0] * delta / n)


def _b_log1p_sum_exp(node):
    x = node.parents[0]
    mask = node.attrs["mask"]
    contrib = np.zeros_like(x.data)
    np.exp(x.data - node.data, out=contrib, where=mask)
    _acc(x, node.grad * contrib)


_BACKWARD = {
    "matmul": _b_matmul,
    "add": _b_add,
    "sub": _b_sub,
    "elementwise-mul": _b_emul,
    "scale": _b_scale,
    "exp": _b_exp,
    "log": _b_log,
    "abs": _b_abs,
    "sum": _b_sum,
    "mean": _b_mean,
    "concat-cols": _b_concat,
    "transpose": _b_transpose,
    "row-l2-normalize": _b_rownorm,
    "stop-gradient": _b_stopgrad,
    "softmax-xent": _b_softmax_xent,
    "log1p-sum-exp": _b_log1p_sum_exp,
}


def concat_cols(values: list[Value]) -> Value:
    return apply_primitive(values[0].graph, "concat-cols", list(values))


def row_l2_normalize(value: Value) -> Value:
    return apply_primitive(value.graph, "row-l2-normalize", [value])


def stop_gradient(value: Value) -> Value:
    return apply_primitive(value.graph, "stop-gradient", [value])


def cosine_similarity_matrix(z: Value) -> Value:
    """Pairwise cosine similarities between the rows of `z` (n x n).

    Rows are l2-normalized first (zero rows are rejected, naming the row
    index).  The raw Gram matrix is symmetrized as (R + R^T)/2 so the result
    equals its transpose bitwise; entries stay within 1e-12 of [-1, 1].
    """
    normed = row_l2_normalize(z)
    raw = normed @ normed.T
    return (raw + raw.T).scale(0.5)


def softmax_cross_entropy(logits: Value, targets) -> Value:
    """Mean over rows of -log softmax(logits)[target], max-stabilized."""
    targets = np.asarray(targets, dtype=np.intp).ravel()
    n, c = logits.data.shape
    if targets.shape != (n,):
        raise ValueError(f"expected {n} targets, got {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target out of range [0, {c})")
    m = logits.data.max(axis=1, keepdims=True)
    ex = np.exp(logits.data - m)
    z = ex.sum(axis=1, keepdims=True)
    logp = (logits.data - m) - np.log(z)
    loss = -logp[np.arange(n), targets].mean()
    return logits.graph._node(
        "softmax-xent", np.array([[loss]]), (logits,), logits.requires_grad,
        {"probs": ex / z, "targets": targets})


def log1p_sum_exp(x: Value, mask: np.ndarray | None = None) -> Value:
    """Per row of `x`: log(1 + sum over unmasked entries of exp(x)), n x 1.

    `mask` is a boolean array of x's shape; masked-out (False) entries do
    not contribute.  A row with no unmasked entries yields log(1) = 0.
    Evaluated in max-subtracted form so large entries cannot overflow.
    """
    if mask is None:
        mask = np.ones(x.data.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.data.shape:
            raise _shape_error("log1p-sum-exp mask", x.data.shape, mask.shape)
    masked = np.where(mask, x.data, -np.inf)
    m = np.maximum(masked.max(axis=1, keepdims=True, initial=-np.inf), 0.0)
    total = np.exp(masked - m).sum(axis=1, keepdims=True)
    out = m + np.log(np.exp(-m) + total)
    return x.graph._node("log1p-sum-exp", out, (x,), x.requires_grad, {"mask": mask})


def backward(graph: Graph, loss: Value) -> dict[int, np.ndarray]:
    """Reverse-accumulate gradients of a scalar loss through `graph`.

    Returns a map node-id -> gradient for every node that requires grad;
    nodes cut off by stop-gradient (or otherwise unreachable from the loss)
    get an all-zero gradient.  Also leaves each node's `.grad` populated.
    """
    if loss.graph is not graph:
        raise ValueError("loss does not belong to this graph")
    if loss.data.shape != (1, 1):
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    for node in graph.nodes:
        node.grad = None
    if loss.requires_grad:
        loss.grad = np.ones((1, 1))
        for nid in range(loss.nid, -1, -1):
            node = graph.nodes[nid]
            if node.grad is None or not node.parents:
                continue
            _BACKWARD[node.kind](node)
    grads: dict[int, np.ndarray] = {}
    for node in graph.nodes:
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            grads[node.nid] = node.grad
    return grads


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float


def _eval_scalar(fn, point: np.ndarray) -> float:
    out = fn(Graph().leaf(point))
    if out.data.shape != (1, 1):
        raise ValueError(f"fn must return a scalar Value, got shape {out.data.shape}")
    val = float(out.data[0, 0])
    if not np.isfinite(val):
        raise ValueError("non-finite forward value")
    return val


def grad_check(fn, point, epsilon: float = 1e-5) -> GradCheckReport:
    """Compare the analytic gradient of `fn` at `point` to central differences.

    `fn` receives a leaf Value in a fresh graph and must return a scalar
    Value of the same graph.  Per-coordinate relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1), which degrades to
    absolute error where the gradient is tiny.
    """
    point = _as_matrix(point)
    graph = Graph()
    x = graph.leaf(point, requires_grad=True)
    out = fn(x)
    if out.data.shape != (1, 1):
        raise ValueError(f"fn must return a scalar Value, got shape {out.data.shape}")
    if not np.isfinite(out.data[0, 0]):
        raise ValueError("non-finite forward value")
    backward(graph, out)
    analytic = x.grad.copy()

    numeric = np.zeros_like(point)
    for idx in np.ndindex(point.shape):
        plus = point.copy()
        plus[idx] += epsilon
        minus = point.copy()
        minus[idx] -= epsilon
        numeric[idx] = (_eval_scalar(fn, plus) - _eval_scalar(fn, minus)) / (2.0 * epsilon)

    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel_err = abs_err / denom
    return GradCheckReport(float(abs_err.max()), float(rel_err.max()))
