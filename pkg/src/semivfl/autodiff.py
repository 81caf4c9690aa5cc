"""Dense fp64 tensors with reverse-mode automatic differentiation.

Values are numpy float64 arrays wrapped in graph ``Node`` objects. Graphs are
built eagerly, one per training step, and discarded after ``backward``; there
is no graph reuse, fusion, or mixed precision. Every primitive validates its
output for NaN/Inf so numerical problems surface at the op that caused them.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Node",
    "ShapeMismatch",
    "NonFiniteValue",
    "NondeterministicLoss",
    "leaf",
    "constant",
    "as_node",
    "apply_primitive",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "concat_rows",
    "concat_cols",
    "relu",
    "log",
    "sqrt",
    "square",
    "clip",
    "mean",
    "sum_all",
    "frobenius_sq",
    "frobenius_norm",
    "sigmoid",
    "softmax_rows",
    "l2_normalize_rows",
    "pairwise_diff",
    "submatrix",
    "gather_rows",
    "stop_gradient",
    "backward",
    "AdamState",
    "adam_step",
    "Adam",
    "grad_check",
]


class ShapeMismatch(ValueError):
    """Raised when operand shapes do not conform to a primitive's rule."""


class NonFiniteValue(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class NondeterministicLoss(RuntimeError):
    """Raised by grad_check when two evaluations of the loss differ."""


class Node:
    """One vertex of the gradient graph.

    Holds an fp64 value, the producing primitive's name, parent references,
    and (for leaves that require gradients) the accumulated gradient.
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "op", "_backward")

    def __init__(self, value, parents=(), backward=None, requires_grad=False, op="leaf"):
        self.value = value
        self.parents = tuple(parents)
        self._backward = backward
        self.op = op
        self.grad = None
        if parents:
            self.requires_grad = any(p.requires_grad for p in self.parents)
        else:
            self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_node(other))

    def __radd__(self, other):
        return add(as_node(other), self)

    def __sub__(self, other):
        return sub(self, as_node(other))

    def __rsub__(self, other):
        return sub(as_node(other), self)

    def __mul__(self, other):
        return mul(self, as_node(other))

    def __rmul__(self, other):
        return mul(as_node(other), self)

    def __matmul__(self, other):
        return matmul(self, as_node(other))

    def __neg__(self):
        return mul(constant(-1.0), self)


def _asarray(value):
    return np.asarray(value, dtype=np.float64)


def leaf(value, requires_grad=False) -> Node:
    """Wrap an array as a graph leaf (a parameter when requires_grad=True)."""
    return Node(_asarray(value), requires_grad=requires_grad)


def constant(value) -> Node:
    return leaf(value, requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _finish(op, value, parents, backward) -> Node:
    value = _asarray(value)
    if not np.all(np.isfinite(value)):
        raise NonFiniteValue(f"primitive {op!r} produced non-finite values")
    return Node(value, parents=parents, backward=backward, op=op)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.value.shape} and {b.value.shape} do not broadcast") from None


def add(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a, b)
    return _finish(
        "add", a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("sub", a, b)
    return _finish(
        "sub", a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("mul", a, b)
    return _finish(
        "mul", a.value * b.value, (a, b),
        lambda g: (_unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape)),
    )


def matmul(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch(f"matmul: inner dims of {a.value.shape} and {b.value.shape} do not match")
    return _finish(
        "matmul", a.value @ b.value, (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def transpose(a: Node) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeMismatch(f"transpose: expected a matrix, got shape {a.value.shape}")
    return _finish("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def _concat(op, axis, nodes):
    nodes = tuple(as_node(n) for n in nodes)
    if not nodes:
        raise ShapeMismatch(f"{op}: needs at least one input")
    other = 1 - axis
    ref = nodes[0].value.shape
    for n in nodes:
        if n.value.ndim != 2 or n.value.shape[other] != ref[other]:
            raise ShapeMismatch(f"{op}: shape {n.value.shape} incompatible with {ref}")
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _finish(op, np.concatenate([n.value for n in nodes], axis=axis), nodes, bwd)


def concat_rows(*nodes) -> Node:
    """Stack matrices vertically (axis 0)."""
    return _concat("concat_rows", 0, nodes)


def concat_cols(*nodes) -> Node:
    """Fuse matrices side by side (axis 1) — the cut-layer operation."""
    return _concat("concat_cols", 1, nodes)


def relu(a: Node) -> Node:
    a = as_node(a)
    mask = a.value > 0.0
    return _finish("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def log(a: Node) -> Node:
    a = as_node(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return _finish("log", out, (a,), lambda g: (g / a.value,))


def sqrt(a: Node) -> Node:
    """Elementwise square root; gradient at exactly zero is defined as zero."""
    a = as_node(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)

    def bwd(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, g / (2.0 * safe), 0.0),)

    return _finish("sqrt", out, (a,), bwd)


def square(a: Node) -> Node:
    a = as_node(a)
    return _finish("square", a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp values to [lo, hi]; gradient passes only strictly inside the band."""
    a = as_node(a)
    inside = (a.value > lo) & (a.value < hi)
    return _finish("clip", np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def mean(a: Node) -> Node:
    a = as_node(a)
    n = a.value.size
    return _finish("mean", np.mean(a.value), (a,), lambda g: (np.full_like(a.value, g / n),))


def sum_all(a: Node) -> Node:
    a = as_node(a)
    return _finish("sum_all", np.sum(a.value), (a,), lambda g: (np.full_like(a.value, g),))


def frobenius_sq(a: Node) -> Node:
    """Sum of squared entries (squared Frobenius norm), as a scalar."""
    a = as_node(a)
    return _finish("frobenius_sq", np.sum(a.value * a.value), (a,), lambda g: (2.0 * g * a.value,))


def frobenius_norm(a: Node) -> Node:
    """Plain (unsquared) Frobenius norm; gradient at the zero matrix is zero."""
    a = as_node(a)
    out = np.sqrt(np.sum(a.value * a.value))

    def bwd(g):
        if out == 0.0:
            return (np.zeros_like(a.value),)
        return (g * a.value / out,)

    return _finish("frobenius_norm", out, (a,), bwd)


def sigmoid(a: Node) -> Node:
    a = as_node(a)
    x = a.value
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _finish("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax_rows(a: Node, tau: float) -> Node:
    """Row-wise softmax of x/tau with max-subtraction stabilization."""
    a = as_node(a)
    if tau <= 0:
        raise ValueError(f"softmax_rows: temperature must be positive, got {tau}")
    if a.value.ndim != 2:
        raise ShapeMismatch(f"softmax_rows: expected a matrix, got shape {a.value.shape}")
    z = a.value / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot) / tau,)

    return _finish("softmax_rows", out, (a,), bwd)


def l2_normalize_rows(a: Node, eps: float = 1e-12) -> Node:
    """Divide each row by max(row L2 norm, eps); zero rows stay zero."""
    a = as_node(a)
    if eps <= 0:
        raise ValueError(f"l2_normalize_rows: eps must be positive, got {eps}")
    if a.value.ndim != 2:
        raise ShapeMismatch(f"l2_normalize_rows: expected a matrix, got shape {a.value.shape}")
    norms = np.sqrt(np.sum(a.value * a.value, axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = a.value / denom

    def bwd(g):
        guarded = norms <= eps
        proj = (g - out * (g * out).sum(axis=1, keepdims=True)) / denom
        return (np.where(guarded, g / eps, proj),)

    return _finish("l2_normalize_rows", out, (a,), bwd)


def pairwise_diff(a: Node) -> Node:
    """All pairwise differences of a column of scores: out[i, j] = a[i] - a[j]."""
    a = as_node(a)
    v = a.value.reshape(-1)
    n = v.shape[0]
    out = v[:, None] - v[None, :]

    def bwd(g):
        return ((g.sum(axis=1) - g.sum(axis=0)).reshape(a.value.shape),)

    del n
    return _finish("pairwise_diff", out, (a,), bwd)


def submatrix(a: Node, rows, cols) -> Node:
    """Select the block a[rows][:, cols]; backward scatters into place."""
    a = as_node(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if a.value.ndim != 2:
        raise ShapeMismatch(f"submatrix: expected a matrix, got shape {a.value.shape}")

    def bwd(g):
        full = np.zeros_like(a.value)
        np.add.at(full, np.ix_(rows, cols), g)
        return (full,)

    return _finish("submatrix", a.value[np.ix_(rows, cols)], (a,), bwd)


def gather_rows(table: Node, indices) -> Node:
    """Embedding lookup: rows of `table` at `indices`; backward scatter-adds."""
    table = as_node(table)
    idx = np.asarray(indices, dtype=np.intp)
    n_rows = table.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"gather_rows: index out of range for table with {n_rows} rows")

    def bwd(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx, g)
        return (full,)

    return _finish("gather_rows", table.value[idx], (table,), bwd)


def stop_gradient(a: Node) -> Node:
    """Identical forward value, zero contribution to every upstream gradient."""
    a = as_node(a)
    return Node(a.value, parents=(), requires_grad=False, op="stop_gradient")


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "transpose": transpose,
    "concat_rows": concat_rows,
    "concat_cols": concat_cols,
    "relu": relu,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "mean": mean,
    "sum_all": sum_all,
    "frobenius_sq": frobenius_sq,
    "frobenius_norm": frobenius_norm,
    "sigmoid": sigmoid,
    "pairwise_diff": pairwise_diff,
    "stop_gradient": stop_gradient,
}


def apply_primitive(op_id: str, *inputs) -> Node:
    """Dispatch a registered primitive by name."""
    try:
        fn = PRIMITIVES[op_id]
    except KeyError:
        raise KeyError(f"unknown primitive {op_id!r}") from None
    return fn(*inputs)


def _topo_order(root: Node):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(root: Node, seed=None) -> None:
    """Accumulate d(root)/d(param) into every reachable parameter's .grad.

    `root` must be scalar unless a seed gradient of matching shape is given.
    Stop-gradient nodes have no parents and therefore block traversal.
    """
    if seed is None:
        if root.value.size != 1:
            raise ShapeMismatch(f"backward: root must be scalar, got shape {root.value.shape}")
        seed = np.ones_like(root.value)
    else:
        seed = _asarray(seed)
        if seed.shape != root.value.shape:
            raise ShapeMismatch(f"backward: seed shape {seed.shape} != root shape {root.value.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    pending = {id(root): seed}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s, dtype=np.float64) for s in shapes]
        self.v = [np.zeros(s, dtype=np.float64) for s in shapes]
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(values, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns the new parameter arrays."""
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    if len(values) != len(state.m) or len(values) != len(grads):
        raise ShapeMismatch("adam_step: param/grad/state lengths differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for value, grad, m, v in zip(values, grads, state.m, state.v):
        if value.shape != grad.shape or value.shape != m.shape:
            raise ShapeMismatch(f"adam_step: shape {grad.shape} does not match parameter {value.shape}")
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        out.append(value - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return out


class Adam:
    """Adam over a list of parameter leaves, reading .grad and writing .value."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState([p.value.shape for p in self.params], beta1, beta2, eps)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        new_values = adam_step([p.value for p in self.params], grads, self.state, self.lr)
        for p, nv in zip(self.params, new_values):
            p.value = nv
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def grad_check(loss_builder, params, delta: float = 1e-5) -> float:
    """Compare reverse-mode gradients against central finite differences.

    `loss_builder` must be a pure function of the parameter values, rebuilding
    the graph on each call. Returns the max relative error over all
    coordinates, |bp - fd| / max(|bp|, |fd|, 1).
    """
    if not (1e-7 <= delta <= 1e-4):
        raise ValueError(f"grad_check: delta must lie in [1e-7, 1e-4], got {delta}")
    first = float(loss_builder().value)
    second = float(loss_builder().value)
    if first != second:
        raise NondeterministicLoss(f"loss_builder is not deterministic: {first!r} != {second!r}")
    for p in params:
        p.grad = None
    backward(loss_builder())
    worst = 0.0
    for p in params:
        bp = (p.grad if p.grad is not None else np.zeros_like(p.value)).reshape(-1)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + delta
            up = float(loss_builder().value)
            flat[i] = orig - delta
            down = float(loss_builder().value)
            flat[i] = orig
            fd = (up - down) / (2.0 * delta)
            err = abs(bp[i] - fd) / max(abs(bp[i]), abs(fd), 1.0)
            if err > worst:
                worst = err
    for p in params:
        p.grad = None
    return worst
