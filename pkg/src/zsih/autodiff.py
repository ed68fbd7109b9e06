"""Minimal reverse-mode autodiff over dense float64 arrays.

The graph is define-by-run: every operation returns a fresh ``Node``
holding the forward value, the parent nodes and a closure computing the
gradient messages for those parents.  ``Node.backward`` walks the graph
once in reverse topological order and accumulates into ``.grad``.

Broadcasting is deliberately restricted to two auditable cases:
scalar-with-array and row-with-matrix.
"""

import numpy as np

__all__ = [
    "Node",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "square",
    "reduce_sum",
    "reduce_mean",
    "softmax",
    "clip",
    "reshape",
    "vecmat",
    "kron_vec",
    "concat_vec",
    "stack_rows",
]


class Node:
    """One value in the computation graph.

    ``data`` and ``grad`` are float64 arrays of identical shape.  Leaf
    nodes carry ``requires_grad`` to mark trainable parameters; interior
    nodes inherit the flag from their inputs.
    """

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._bwd = _bwd

    @property
    def grad(self):
        # allocated on first touch; reads always see a data-shaped array
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self._grad is not None:
            self._grad[...] = 0.0

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars and ndarrays are wrapped as constants.
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

    def backward(self):
        """Populate ``grad`` for every node reachable from this scalar.

        Gradient messages are propagated functionally (fresh arrays per
        pass) and only accumulated into ``.grad`` at each node, so a
        second backward without a reset adds an identical contribution.
        """
        if self.data.ndim != 0:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        order = _topo_order(self)
        msgs = {id(self): np.ones((), dtype=np.float64)}
        for node in order:
            g = msgs.pop(id(node), None)
            if g is None:
                continue
            if node._grad is None:
                node._grad = g if g.flags.owndata else g.copy()
            else:
                node._grad += g
            if node._bwd is None:
                continue
            for parent, pg in zip(node._parents, node._bwd(g)):
                if not parent.requires_grad:
                    continue
                acc = msgs.get(id(parent))
                if acc is None:
                    msgs[id(parent)] = np.array(pg, dtype=np.float64, copy=True)
                else:
                    acc += pg


def _topo_order(root):
    """Reverse topological order of the subgraph below ``root``."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    order.reverse()
    return order


def constant(data):
    """Wrap an array as a graph value that never receives gradients."""
    return Node(data, requires_grad=False)


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _requires(*nodes):
    return any(n.requires_grad for n in nodes)


# ---------------------------------------------------------------------------
# binary elementwise ops with restricted broadcasting


def _check_broadcast(a_shape, b_shape):
    """Allow equal shapes, scalar-with-array and row-with-matrix only."""
    if a_shape == b_shape:
        return
    if a_shape == () or b_shape == ():
        return
    # row vector against matrix: (d,) or (1, d) with (n, d)
    for row, mat in ((a_shape, b_shape), (b_shape, a_shape)):
        if len(mat) == 2 and row in ((mat[1],), (1, mat[1])):
            return
    raise ValueError(f"unsupported broadcast between shapes {a_shape} and {b_shape}")


def _reduce_to(g, shape):
    """Sum the broadcast axes of ``g`` back down to ``shape``."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    if len(shape) == 1:
        return g.sum(axis=0)
    return g.sum(axis=0, keepdims=True)


def _binary(a, b, out, da, db):
    a, b = as_node(a), as_node(b)

    def bwd(g):
        return (_reduce_to(da(g), a.shape), _reduce_to(db(g), b.shape))

    return Node(out, requires_grad=_requires(a, b), _parents=(a, b), _bwd=bwd)


def add(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.shape, b.shape)
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.shape, b.shape)
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.shape, b.shape)
    return _binary(
        a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data
    )


# ---------------------------------------------------------------------------
# unary elementwise ops


def _unary(a, out, da):
    a = as_node(a)

    def bwd(g):
        return (da(g),)

    return Node(out, requires_grad=a.requires_grad, _parents=(a,), _bwd=bwd)


def relu(a):
    a = as_node(a)
    mask = a.data > 0
    return _unary(a, np.where(mask, a.data, 0.0), lambda g: g * mask)


def _sigmoid_values(x):
    # two-branch form avoids exp overflow for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_node(a)
    s = _sigmoid_values(a.data)
    return _unary(a, s, lambda g: g * s * (1.0 - s))


def exp(a):
    a = as_node(a)
    # overflow becomes inf and surfaces through the non-finite loss guard
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _unary(a, e, lambda g: g * e)


def log(a):
    a = as_node(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    return _unary(a, np.log(a.data), lambda g: g / a.data)


def square(a):
    a = as_node(a)
    return _unary(a, a.data * a.data, lambda g: g * (2.0 * a.data))


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient is zero where clamping acted."""
    a = as_node(a)
    mask = (a.data > lo) & (a.data < hi)
    return _unary(a, np.clip(a.data, lo, hi), lambda g: g * mask)


# ---------------------------------------------------------------------------
# reductions and structure


def reduce_sum(a, axis=None):
    a = as_node(a)
    _check_axis(a, axis)
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Node(out, requires_grad=a.requires_grad, _parents=(a,), _bwd=bwd)


def reduce_mean(a, axis=None):
    a = as_node(a)
    _check_axis(a, axis)
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)

    return Node(out, requires_grad=a.requires_grad, _parents=(a,), _bwd=bwd)


def _check_axis(a, axis):
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ValueError(f"axis {axis} invalid for shape {a.shape}")


def softmax(a):
    """Softmax over a 1-D vector (shift-invariant, max-stabilized)."""
    a = as_node(a)
    if a.ndim != 1:
        raise ValueError(f"softmax expects a vector, got shape {a.shape}")
    e = np.exp(a.data - a.data.max())
    s = e / e.sum()

    def bwd(g):
        return (s * (g - np.dot(g, s)),)

    return Node(s, requires_grad=a.requires_grad, _parents=(a,), _bwd=bwd)


def reshape(a, shape):
    a = as_node(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return Node(out, requires_grad=a.requires_grad, _parents=(a,), _bwd=bwd)


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(
            f"matmul expects matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def bwd(g):
        return (g @ b.data.T, a.data.T @ g)

    return Node(a.data @ b.data, requires_grad=_requires(a, b), _parents=(a, b), _bwd=bwd)


def vecmat(v, w):
    """Vector-matrix product: [d] x [d, k] -> [k]."""
    v, w = as_node(v), as_node(w)
    if v.ndim != 1 or w.ndim != 2 or v.shape[0] != w.shape[0]:
        raise ValueError(f"vecmat shapes incompatible: {v.shape} x {w.shape}")

    def bwd(g):
        return (w.data @ g, np.outer(v.data, g))

    return Node(v.data @ w.data, requires_grad=_requires(v, w), _parents=(v, w), _bwd=bwd)


def kron_vec(a, b):
    """Kronecker product of two vectors: out[i*q + j] = a[i] * b[j]."""
    a, b = as_node(a), as_node(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError(
            f"kron_vec expects vectors, got shapes {a.shape} and {b.shape}"
        )
    p, q = a.shape[0], b.shape[0]
    out = np.outer(a.data, b.data).reshape(p * q)

    def bwd(g):
        gm = g.reshape(p, q)
        return (gm @ b.data, a.data @ gm)

    return Node(out, requires_grad=_requires(a, b), _parents=(a, b), _bwd=bwd)


def concat_vec(a, b):
    """Concatenate two vectors; backward splits the gradient."""
    a, b = as_node(a), as_node(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError(
            f"concat_vec expects vectors, got shapes {a.shape} and {b.shape}"
        )
    p = a.shape[0]

    def bwd(g):
        return (g[:p], g[p:])

    return Node(
        np.concatenate([a.data, b.data]),
        requires_grad=_requires(a, b),
        _parents=(a, b),
        _bwd=bwd,
    )


def stack_rows(nodes):
    """Stack equal-length vectors into a matrix, one node per row."""
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ValueError("stack_rows needs at least one row")
    d = nodes[0].shape
    if any(n.ndim != 1 or n.shape != d for n in nodes):
        raise ValueError("stack_rows requires identically shaped vectors")
    out = np.stack([n.data for n in nodes])

    def bwd(g):
        return tuple(g[i] for i in range(len(nodes)))

    return Node(
        out,
        requires_grad=any(n.requires_grad for n in nodes),
        _parents=tuple(nodes),
        _bwd=bwd,
    )
