"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays. Every differentiable operation records a closure
that maps the output gradient to per-input gradients; backward() replays
the closures in reverse topological order. Single-writer semantics: one
training loop owns a graph at a time.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_default_dtype = np.dtype(np.float64)


def set_default_dtype(dtype):
    """Set the dtype used for tensors created from non-float data.

    float64 is mandatory for gradient checks; float32 is a speed option
    for training builds.
    """
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}, use float32 or float64")
    _default_dtype = dt


def get_default_dtype():
    return _default_dtype


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data)
        if data.dtype not in _FLOAT_DTYPES:
            data = data.astype(_default_dtype)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(data) if requires_grad else None
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- graph construction -------------------------------------------------

    @staticmethod
    def _from_op(data, prev, backward):
        out = Tensor(data)
        out._prev = tuple(prev)
        out._backward = backward
        return out

    def backward(self):
        """Reverse-mode pass from a scalar; accumulates into leaf .grad."""
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is not None:
                for inp, gi in node._backward(g):
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi

    # ---- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        other = _ensure_tensor(other)
        out_data = self.data + other.data
        a, b = self, other

        def backward(g):
            return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

        return Tensor._from_op(out_data, (a, b), backward)

    __radd__ = __add__

    def __mul__(self, other):
        other = _ensure_tensor(other)
        a, b = self, other
        out_data = a.data * b.data

        def backward(g):
            return [
                (a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)),
            ]

        return Tensor._from_op(out_data, (a, b), backward)

    __rmul__ = __mul__

    def __neg__(self):
        a = self

        def backward(g):
            return [(a, -g)]

        return Tensor._from_op(-a.data, (a,), backward)

    def __sub__(self, other):
        other = _ensure_tensor(other)
        a, b = self, other

        def backward(g):
            return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

        return Tensor._from_op(a.data - b.data, (a, b), backward)

    def __rsub__(self, other):
        return _ensure_tensor(other) - self

    def __truediv__(self, other):
        other = _ensure_tensor(other)
        a, b = self, other

        def backward(g):
            return [
                (a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
            ]

        return Tensor._from_op(a.data / b.data, (a, b), backward)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self

        def backward(g):
            return [(a, g * exponent * a.data ** (exponent - 1))]

        return Tensor._from_op(a.data ** exponent, (a,), backward)

    # ---- linear algebra ------------------------------------------------------

    def __matmul__(self, other):
        other = _ensure_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")

        def backward(g):
            return [(a, g @ b.data.T), (b, a.data.T @ g)]

        return Tensor._from_op(a.data @ b.data, (a, b), backward)

    # ---- nonlinearities and reductions ---------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0

        def backward(g):
            return [(a, g * mask)]

        return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), backward)

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def backward(g):
            return [(a, g * out_data)]

        return Tensor._from_op(out_data, (a,), backward)

    def log(self):
        a = self

        def backward(g):
            return [(a, g / a.data)]

        return Tensor._from_op(np.log(a.data), (a,), backward)

    def cos(self):
        a = self

        def backward(g):
            return [(a, -g * np.sin(a.data))]

        return Tensor._from_op(np.cos(a.data), (a,), backward)

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return [(a, np.broadcast_to(g, a.shape).copy())]

        return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims=False):
        a = self
        count = a.size if axis is None else np.prod(
            [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
        )

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return [(a, np.broadcast_to(g, a.shape) / count)]

        return Tensor._from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old_shape = a.shape

        def backward(g):
            return [(a, g.reshape(old_shape))]

        return Tensor._from_op(a.data.reshape(shape), (a,), backward)


def _ensure_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def repeat(t, repeats, axis=0):
    """np.repeat with uniform repeat count; backward sums over the copies."""
    a = _ensure_tensor(t)

    def backward(g):
        new_shape = (
            g.shape[:axis] + (a.shape[axis], repeats) + g.shape[axis + 1:]
        )
        return [(a, g.reshape(new_shape).sum(axis=axis + 1))]

    return Tensor._from_op(np.repeat(a.data, repeats, axis=axis), (a,), backward)


def grad(loss, leaves):
    """Gradient of a recorded scalar loss with respect to the given leaves.

    Leaves that did not participate in the loss get an exactly-zero gradient.
    Training-time .grad accumulators on the leaves are left untouched.
    """
    leaves = list(leaves)
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    for leaf in leaves:
        if not leaf.requires_grad:
            raise ValueError("every leaf must have requires_grad=True")
    saved = [leaf.grad for leaf in leaves]
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)
    try:
        loss.backward()
        return {leaf: Tensor(leaf.grad.copy()) for leaf in leaves}
    finally:
        for leaf, old in zip(leaves, saved):
            leaf.grad = old


def make_rng(seed):
    """Seedable generator: identical seed and call sequence give identical draws."""
    return np.random.default_rng(seed)
