"""Reverse-mode automatic differentiation over numpy arrays.

A small define-by-run tape: every op returns a new Tensor that remembers its
parents and a closure propagating the output gradient to them. backward()
walks the tape once in reverse topological order. Only the operations the
models in this package need are implemented; everything is plain numpy so
dtype (float32 for training, float64 for gradient checks) is preserved
end to end.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference rollouts)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An ndarray plus the tape bookkeeping needed for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, grad):
        # Views are copied so tiny slices do not pin their parent buffers.
        if self.grad is None:
            self.grad = grad if grad.base is None else grad.copy()
        else:
            self.grad = self.grad + grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- backward ------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        if not np.isfinite(self.data):
            raise NumericError("backward() called on a non-finite value")
        # Iterative topological sort; rollouts build graphs deeper than the
        # Python recursion limit.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                # Interior activations never need their gradient again.
                if not isinstance(node, Parameter):
                    node.grad = None
                node._parents = ()
                node._backward = None

    # -- arithmetic ----------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return Tensor._result(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate(-g)

        return Tensor._result(-a.data, (a,), backward)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._result(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._result(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        k = float(exponent)
        out = a.data ** k

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * k * a.data ** (k - 1.0))

        return Tensor._result(out, (a,), backward)

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError("matmul expects 2-D tensors")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._result(a.data @ b.data, (a, b), backward)

    # -- elementwise ----------------------------------------------------------

    def exp(self):
        a = self
        out = np.exp(a.data)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * out)

        return Tensor._result(out, (a,), backward)

    def log(self):
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate(g / a.data)

        return Tensor._result(np.log(a.data), (a,), backward)

    def tanh(self):
        a = self
        out = np.tanh(a.data)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * (1.0 - out * out))

        return Tensor._result(out, (a,), backward)

    def relu(self):
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * (a.data > 0))

        return Tensor._result(np.maximum(a.data, 0.0), (a,), backward)

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * 0.5 / out)

        return Tensor._result(out, (a,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if not a.requires_grad:
                return
            g_arr = np.asarray(g)
            if axis is None:
                grad = np.broadcast_to(g_arr, a.data.shape)
            else:
                axes = axis if isinstance(axis, tuple) else (axis,)
                if not keepdims:
                    for ax in sorted(ax % a.data.ndim for ax in axes):
                        g_arr = np.expand_dims(g_arr, ax)
                grad = np.broadcast_to(g_arr, a.data.shape)
            a._accumulate(grad.astype(a.data.dtype, copy=False).copy())

        return Tensor._result(np.asarray(out), (a,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape ----------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate(g.reshape(a.data.shape))

        return Tensor._result(a.data.reshape(shape), (a,), backward)

    def transpose(self, *axes):
        a = self
        if not axes:
            axes = tuple(reversed(range(a.data.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g.transpose(inverse))

        return Tensor._result(a.data.transpose(axes), (a,), backward)

    def __getitem__(self, index):
        a = self
        out = a.data[index]
        parts = index if isinstance(index, tuple) else (index,)
        fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

        def backward(g):
            if not a.requires_grad:
                return
            full = np.zeros_like(a.data)
            if fancy:
                np.add.at(full, index, g)
            else:
                full[index] += g
            a._accumulate(full)

        return Tensor._result(out, (a,), backward)


class Parameter(Tensor):
    """A leaf tensor updated by an optimizer; gradients accumulate on it."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def softmax(x, axis=-1):
    """Numerically stable softmax along `axis` (shift by a detached max)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = np.exp(shifted)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * out).sum(axis=axis, keepdims=True)
            x._accumulate(out * (g - inner))

    return Tensor._result(out, (x,), backward)


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_z

    def backward(g):
        if x.requires_grad:
            sm = np.exp(out)
            x._accumulate(g - sm * g.sum(axis=axis, keepdims=True))

    return Tensor._result(out, (x,), backward)


def linear(x, w, b):
    """Fused x @ w + b (one tape node instead of two)."""
    out = x.data @ w.data
    out += b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return Tensor._result(out, (x, w, b), backward)


def embedding(table, ids):
    """Row lookup table[ids] with scatter-add backward (ids: int array)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"id out of range [0, {table.data.shape[0]}): got {ids.min()}..{ids.max()}"
        )
    out = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table._accumulate(full)

    return Tensor._result(out, (table,), backward)


def conv2d(x, w, b):
    """3x3 same-padding convolution; heavy lifting lives in the kernel backend."""
    from . import kernels

    out = kernels.conv2d_forward(x.data, w.data, b.data)

    def backward(g):
        need_dx = x.requires_grad
        dx, dw, db = kernels.conv2d_backward(x.data, w.data, g, need_dx=need_dx)
        if need_dx:
            x._accumulate(dx)
        if w.requires_grad:
            w._accumulate(dw)
        if b.requires_grad:
            b._accumulate(db)

    return Tensor._result(out, (x, w, b), backward)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)
