"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Graphs are built eagerly: constructing a node runs its forward formula
immediately, so construction doubles as evaluation and every intermediate
is memoized on the node. Graphs are rebuilt from scratch on every
optimization step; nodes and tensors are immutable once built, and
backward accumulates adjoints in a per-call dictionary, so finished graphs
are safe to share across threads.
"""

import numpy as np


class DiffcoreError(Exception):
    pass


class ShapeError(DiffcoreError):
    pass


class EvaluationError(DiffcoreError):
    pass


class Tensor:
    """Dense multi-dimensional float64 array, row-major, finite by construction."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise EvaluationError("tensor contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    @staticmethod
    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=np.float64))


def _as_array(x):
    if isinstance(x, Tensor):
        return x.values
    if isinstance(x, Node):
        return x.value
    return np.ascontiguousarray(x, dtype=np.float64)


class Node:
    """One primitive application; holds its memoized output and adjoint rule.

    ``vjp(g)`` maps the output adjoint to a tuple of input adjoints (one per
    entry of ``inputs``). Leaves have no inputs; constants additionally stop
    gradient propagation.
    """

    __slots__ = ("op", "inputs", "value", "requires_grad", "_vjp")

    def __init__(self, op, inputs, value, vjp, requires_grad):
        self.op = op
        self.inputs = tuple(inputs)
        if not np.all(np.isfinite(value)):
            raise EvaluationError(f"non-finite value produced by node '{op}'")
        self.value = value
        self.requires_grad = requires_grad
        self._vjp = vjp

    @property
    def output(self):
        return Tensor(self.value)

    @property
    def shape(self):
        return self.value.shape

    # operator sugar; second operand may be a Node, Tensor, array or float
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"


def leaf(tensor):
    """Differentiable graph input; backward() reports its gradient."""
    t = tensor if isinstance(tensor, Tensor) else Tensor(tensor)
    return Node("leaf", (), t.values, None, True)


def constant(tensor):
    """Graph input excluded from gradient propagation."""
    t = tensor if isinstance(tensor, Tensor) else Tensor(tensor)
    return Node("const", (), t.values, None, False)


def _lift(x):
    if isinstance(x, Node):
        return x
    if isinstance(x, (int, float)):
        return constant(np.asarray(float(x)))
    return constant(x)


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} does not match shape {b.shape}")


def _unbroadcast(grad, shape):
    # reduce a broadcast adjoint back to the operand's shape
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_ok(a_shape, b_shape):
    try:
        np.broadcast_shapes(a_shape, b_shape)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# primitive catalog
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: shape {a.shape} does not broadcast with shape {b.shape}")
    val = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node("add", (a, b), val, vjp, a.requires_grad or b.requires_grad)


def subtract(a, b):
    a, b = _lift(a), _lift(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"subtract: shape {a.shape} does not broadcast with shape {b.shape}")
    val = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Node("subtract", (a, b), val, vjp, a.requires_grad or b.requires_grad)


def scalar_mul(a, c):
    a = _lift(a)
    c = float(c)
    val = a.value * c

    def vjp(g):
        return (g * c,)

    return Node("scalar_mul", (a,), val, vjp, a.requires_grad)


def mul(a, b):
    """Elementwise product; either operand may also be scalar-shaped."""
    a, b = _lift(a), _lift(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: shape {a.shape} does not broadcast with shape {b.shape}")
    val = a.value * b.value

    def vjp(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Node("mul", (a, b), val, vjp, a.requires_grad or b.requires_grad)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} disagree")
    val = a.value @ b.value

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return Node("matmul", (a, b), val, vjp, a.requires_grad or b.requires_grad)


def transpose(a):
    a = _lift(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-D operand, got {a.shape}")
    val = np.ascontiguousarray(a.value.T)

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return Node("transpose", (a,), val, vjp, a.requires_grad)


def relu(a):
    a = _lift(a)
    val = np.maximum(a.value, 0.0)

    def vjp(g):
        # subgradient at 0 is defined as 0
        return (g * (a.value > 0.0),)

    return Node("relu", (a,), val, vjp, a.requires_grad)


def tanh(a):
    a = _lift(a)
    val = np.tanh(a.value)

    def vjp(g):
        return (g * (1.0 - val * val),)

    return Node("tanh", (a,), val, vjp, a.requires_grad)


def sigmoid(a):
    a = _lift(a)
    val = 1.0 / (1.0 + np.exp(-a.value))

    def vjp(g):
        return (g * val * (1.0 - val),)

    return Node("sigmoid", (a,), val, vjp, a.requires_grad)


def exp(a):
    a = _lift(a)
    val = np.exp(a.value)

    def vjp(g):
        return (g * val,)

    return Node("exp", (a,), val, vjp, a.requires_grad)


def log(a):
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(a.value)

    def vjp(g):
        return (g / a.value,)

    return Node("log", (a,), val, vjp, a.requires_grad)


def sqrt(a):
    a = _lift(a)
    with np.errstate(invalid="ignore"):
        val = np.sqrt(a.value)

    def vjp(g):
        # singular at 0; callers keep gradients away from the kink
        return (g * 0.5 / val,)

    return Node("sqrt", (a,), val, vjp, a.requires_grad)


def total(a):
    """Sum of all entries, as a scalar node."""
    a = _lift(a)
    val = np.asarray(a.value.sum())

    def vjp(g):
        return (np.broadcast_to(g, a.shape).copy() if a.shape else g,)

    return Node("sum", (a,), val, vjp, a.requires_grad)


def sqnorm(a):
    """Squared L2 norm of all entries, as a scalar node."""
    a = _lift(a)
    val = np.asarray(np.sum(a.value * a.value))

    def vjp(g):
        return (2.0 * g * a.value,)

    return Node("sqnorm", (a,), val, vjp, a.requires_grad)


def dot(a, b):
    a, b = _lift(a), _lift(b)
    _check_same_shape("dot", a, b)
    val = np.asarray(np.sum(a.value * b.value))

    def vjp(g):
        return g * b.value, g * a.value

    return Node("dot", (a, b), val, vjp, a.requires_grad or b.requires_grad)


def sort_ascending(a):
    """Ascending stable sort; 1-D sorts the vector, 2-D sorts each row.

    The permutation is recorded so the adjoint scatters back exactly; ties
    keep their original order, which makes the backward well-defined.
    """
    a = _lift(a)
    if a.value.ndim == 1:
        perm = np.argsort(a.value, kind="stable")
        val = a.value[perm]

        def vjp(g):
            out = np.zeros_like(a.value)
            out[perm] = g
            return (out,)

    elif a.value.ndim == 2:
        perm = np.argsort(a.value, axis=1, kind="stable")
        val = np.take_along_axis(a.value, perm, axis=1)

        def vjp(g):
            out = np.zeros_like(a.value)
            np.put_along_axis(out, perm, g, axis=1)
            return (out,)

    else:
        raise ShapeError(f"sort: expects a 1-D or 2-D operand, got {a.shape}")
    return Node("sort", (a,), val, vjp, a.requires_grad)


def reshape(a, shape):
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.value.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")
    val = a.value.reshape(shape)
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return Node("reshape", (a,), val, vjp, a.requires_grad)


# ---------------------------------------------------------------------------
# evaluation and backward
# ---------------------------------------------------------------------------

def evaluate(root):
    """Forward value of the graph. Construction already ran and memoized
    every intermediate, so this returns the root's output tensor."""
    return root.output


def _topo_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(root, seed=1.0):
    """Reverse-mode sweep from a scalar root; returns {leaf Node: Tensor}.

    Adjoints accumulate additively over fan-out. Only nodes that require
    gradients are visited; constants terminate propagation.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    adjoint = {id(root): np.asarray(float(seed)).reshape(root.value.shape)}
    grads = {}
    for node in reversed(_topo_order(root)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.op == "leaf":
            grads[node] = Tensor(g)
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node.inputs, parent_grads):
            if not parent.requires_grad:
                continue
            acc = adjoint.get(id(parent))
            if acc is None:
                adjoint[id(parent)] = np.array(pg, dtype=np.float64)
            else:
                acc += pg
    return grads


def grad(root, wrt, seed=1.0):
    """Gradient of a scalar root with respect to one leaf."""
    grads = backward(root, seed)
    if wrt not in grads:
        return Tensor(np.zeros(wrt.shape))
    return grads[wrt]


def finite_diff_gradient(fn, point, h=1e-5):
    """Central-difference gradient oracle: (fn(x+h e_i) - fn(x-h e_i)) / 2h."""
    if h <= 0:
        raise ValueError("finite_diff_gradient: h must be positive")
    x = _as_array(point).copy()
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(Tensor(x)))
        flat[i] = orig - h
        fm = float(fn(Tensor(x)))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"finite_diff_gradient: non-finite evaluation at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(x.shape))
