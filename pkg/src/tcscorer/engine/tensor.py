"""Minimal reverse-mode autodiff on float32 numpy arrays.

Each forward op records a backward closure on the produced tensor; calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into ``.grad``. The graph is per forward
pass: ``backward()`` drops the closures afterwards so iteration N's tape
never outlives iteration N.
"""

from __future__ import annotations

import numpy as np

from ..errors import NonFiniteError, ShapeError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape construction (eval/inference)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A float32 array plus optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float32)
        # ascontiguousarray would promote 0-d scalars to shape (1,).
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
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

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self, cotangent=None):
        """Accumulate gradients of ``self`` into every reachable tensor.

        ``self`` is typically scalar; a non-scalar root needs an explicit
        cotangent of the same shape.
        """
        if cotangent is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward on non-scalar tensor of shape {self.shape} "
                    "requires an explicit cotangent"
                )
            cotangent = np.ones_like(self.data)
        else:
            cotangent = np.asarray(cotangent, dtype=np.float32)
            if cotangent.shape != self.data.shape:
                raise ShapeError(
                    f"cotangent shape {cotangent.shape} does not match "
                    f"tensor shape {self.data.shape}"
                )

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        _accumulate(self, cotangent)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # Release the tape so buffers from this pass can be collected.
            node._parents = ()
            node._backward = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # Convenience arithmetic used by model/training code.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, neg(other))
        return add(self, -float(other))


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    """Build a result tensor, attaching the tape edge when grads are on."""
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _require_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ"
        )


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = np.float32(b)
        out_data = a.data + s

        def backward(gy, a=a):
            _accumulate(a, gy)

        return _node(out_data, (a,), backward)

    _require_same_shape("add", a, b)
    out_data = a.data + b.data

    def backward(gy, a=a, b=b):
        _accumulate(a, gy)
        _accumulate(b, gy)

    return _node(out_data, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(gy, a=a):
        _accumulate(a, -gy)

    return _node(-a.data, (a,), backward)


def sub(a, b):
    return add(a, neg(b)) if isinstance(b, Tensor) else add(a, -float(b))


def rsub(s, a):
    """s - a for a python scalar s."""
    a = as_tensor(a)

    def backward(gy, a=a):
        _accumulate(a, -gy)

    return _node(np.float32(s) - a.data, (a,), backward)


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = np.float32(b)
        out_data = a.data * s

        def backward(gy, a=a, s=s):
            _accumulate(a, gy * s)

        return _node(out_data, (a,), backward)

    _require_same_shape("mul", a, b)
    out_data = a.data * b.data

    def backward(gy, a=a, b=b):
        _accumulate(a, gy * b.data)
        _accumulate(b, gy * a.data)

    return _node(out_data, (a, b), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(
            f"matmul: expected 2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions of {a.data.shape} and {b.data.shape} differ"
        )
    out_data = a.data @ b.data

    def backward(gy, a=a, b=b):
        if a.requires_grad:
            _accumulate(a, gy @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ gy)

    return _node(out_data, (a, b), backward)


def add_row_bias(x, b):
    """x (N, F) plus bias (F,) broadcast over rows."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_row_bias: shapes {x.data.shape} and {b.data.shape}")
    out_data = x.data + b.data[None, :]

    def backward(gy, x=x, b=b):
        _accumulate(x, gy)
        if b.requires_grad:
            _accumulate(b, gy.sum(axis=0))

    return _node(out_data, (x, b), backward)


def add_channel_bias(x, b):
    """x (N, C, H, W) plus bias (C,) broadcast over batch and space."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 4 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_channel_bias: shapes {x.data.shape} and {b.data.shape}")
    out_data = x.data + b.data[None, :, None, None]

    def backward(gy, x=x, b=b):
        _accumulate(x, gy)
        if b.requires_grad:
            _accumulate(b, gy.sum(axis=(0, 2, 3)))

    return _node(out_data, (x, b), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    out_data = a.data.reshape(shape)

    def backward(gy, a=a, old=old):
        _accumulate(a, gy.reshape(old))

    return _node(out_data, (a,), backward)


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(gy, parts=parts, sizes=sizes, axis=axis):
        offset = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * gy.ndim
            sl[axis] = slice(offset, offset + s)
            _accumulate(p, gy[tuple(sl)])
            offset += s

    return _node(out_data, tuple(parts), backward)


def slice_rows(a, start, stop):
    """Contiguous slice along axis 0."""
    a = as_tensor(a)
    out_data = a.data[start:stop].copy()

    def backward(gy, a=a, start=start, stop=stop):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[start:stop] = gy
            _accumulate(a, g)

    return _node(out_data, (a,), backward)


def mean_axes(a, axes, keepdims=False):
    a = as_tensor(a)
    axes = tuple(axes)
    out_data = a.data.mean(axis=axes, keepdims=keepdims)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]

    def backward(gy, a=a, axes=axes, count=count, keepdims=keepdims):
        if not keepdims:
            gy = np.expand_dims(gy, axes)
        _accumulate(a, np.broadcast_to(gy, a.data.shape) / np.float32(count))

    return _node(out_data, (a,), backward)


def mean_all(a):
    a = as_tensor(a)
    out_data = np.asarray(a.data.mean(), dtype=np.float32)
    n = a.data.size

    def backward(gy, a=a, n=n):
        _accumulate(a, np.full(a.data.shape, gy / np.float32(n), dtype=np.float32))

    return _node(out_data, (a,), backward)


def sum_all(a):
    a = as_tensor(a)
    out_data = np.asarray(a.data.sum(), dtype=np.float32)

    def backward(gy, a=a):
        _accumulate(a, np.full(a.data.shape, gy, dtype=np.float32))

    return _node(out_data, (a,), backward)


def pick_rows(a, indices):
    """Gather a[i, indices[i]] for each row i of a 2-d tensor."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    if a.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(
            f"pick_rows: tensor {a.data.shape} with index vector {idx.shape}"
        )
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, idx]

    def backward(gy, a=a, rows=rows, idx=idx):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[rows, idx] = gy
            _accumulate(a, g)

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# activations


def relu(a):
    a = as_tensor(a)
    out_data = np.maximum(a.data, np.float32(0))

    def backward(gy, a=a, y=out_data):
        _accumulate(a, gy * (y > 0))

    return _node(out_data, (a,), backward)


def leaky_relu(a, alpha=0.2):
    a = as_tensor(a)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu: slope must be in (0, 1), got {alpha}")
    alpha = np.float32(alpha)
    # For 0 < alpha < 1, max(x, alpha*x) is exactly the leaky ramp.
    out_data = a.data * alpha
    np.maximum(a.data, out_data, out=out_data)

    def backward(gy, a=a, y=out_data, alpha=alpha):
        g = gy * alpha
        np.copyto(g, gy, where=y > 0)
        _accumulate(a, g)

    return _node(out_data, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(gy, a=a, y=out_data):
        _accumulate(a, gy * (np.float32(1) - y * y))

    return _node(out_data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(gy, a=a, y=out_data):
        _accumulate(a, gy * y * (np.float32(1) - y))

    return _node(out_data, (a,), backward)


def softmax(a, axis=1):
    """Softmax along ``axis``; rows (slices) sum to 1."""
    a = as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NonFiniteError("softmax: input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(gy, a=a, y=out_data, axis=axis):
        inner = (gy * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (gy - inner))

    return _node(out_data, (a,), backward)


def log_clamped(a, floor=1e-7):
    """log(max(a, floor)); gradient is zero where the clamp is active."""
    a = as_tensor(a)
    floor = np.float32(floor)
    clamped = np.maximum(a.data, floor)
    out_data = np.log(clamped)
    active = a.data > floor

    def backward(gy, a=a, clamped=clamped, active=active):
        _accumulate(a, gy * active / clamped)

    return _node(out_data, (a,), backward)
