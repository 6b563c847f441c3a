"""Minimal reverse-mode automatic differentiation on numpy arrays.

Implements exactly the operations the embedding networks need: dense and
convolutional layers, max-pooling, ReLU, concatenation, zero-padding and
the handful of elementwise/reduction primitives the losses are composed
from.  Gradients are accumulated into ``Tensor.grad`` by ``backward()`` on
a scalar result.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ShapeError, StateError

_grad_enabled = True

# Transient buffers inside conv2d are chunked to stay below this many bytes.
_COL_BUDGET = 128 * 1024 * 1024


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array with an optional gradient slot and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

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

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse-mode sweep from a scalar result back to all leaves."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        if self._backward is None and not self.requires_grad:
            raise StateError("backward() called on a tensor with no recorded computation")
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # free the closure and intermediate grads eagerly
                node._backward = None
                if node is not self and not node.requires_grad:
                    node.grad = None
        # drop graph references so large activations can be collected
        for node in order:
            node._parents = ()

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'None'})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _pair(a, b):
    """Coerce scalars to the other operand's dtype so float32 graphs stay float32."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    a, b = _pair(a, b)
    out_data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    out_data = a.data - b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)
    out_data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    out_data = a.data / b.data

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _node(out_data, (a, b), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0)

    def backward(g):
        x._accumulate(g * mask)

    return _node(out_data, (x,), backward)


def sqrt(x):
    x = as_tensor(x)
    out_data = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g / (2.0 * out_data))

    return _node(out_data, (x,), backward)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape))

    return _node(out_data, (x,), backward)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / out_data.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape) / count)

    return _node(out_data, (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return _node(out_data, (x,), backward)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return _node(out_data, tuple(tensors), backward)


def pad_rows(x, total_rows):
    """Zero-pad axis 2 (frequency) of a (B, C, F, T) tensor up to total_rows."""
    x = as_tensor(x)
    b, c, f, t = x.data.shape
    if f > total_rows:
        raise ShapeError(f"cannot pad {f} rows down to {total_rows}")
    out_data = np.zeros((b, c, total_rows, t), dtype=x.data.dtype)
    out_data[:, :, :f, :] = x.data

    def backward(g):
        x._accumulate(g[:, :, :f, :])

    return _node(out_data, (x,), backward)


def _im2col_chunks(batch, k_sq_channels, hw):
    """Yield batch slices small enough that the column buffer stays bounded."""
    itemsize = 4
    per_sample = k_sq_channels * hw * itemsize
    chunk = max(1, int(_COL_BUDGET // max(per_sample, 1)))
    for lo in range(0, batch, chunk):
        yield lo, min(lo + chunk, batch)


def _build_cols(xp, kh, kw, h, w):
    """Column matrix (B, C*kh*kw, H*W) from a padded input (B, C, H+, W+)."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, h * w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = xp[:, :, i : i + h, j : j + w].reshape(b, c, h * w)
    return cols.reshape(b, c * kh * kw, h * w)


def conv2d(x, w, b):
    """2-D convolution, stride 1, 'same' zero padding.

    x: (B, C, H, W); w: (O, C, kh, kw); b: (O,).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weights")
    bs, c, h, wd = x.data.shape
    o, c2, kh, kw = w.data.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weights {c2}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    w2d = w.data.reshape(o, c * kh * kw)
    out_data = np.empty((bs, o, h * wd), dtype=x.data.dtype)
    for lo, hi in _im2col_chunks(bs, c * kh * kw, h * wd):
        cols = _build_cols(xp[lo:hi], kh, kw, h, wd)
        np.matmul(w2d, cols, out=out_data[lo:hi])
    out_data = out_data.reshape(bs, o, h, wd) + b.data.reshape(1, o, 1, 1)
    need_gx = x.requires_grad or x._backward is not None

    def backward(g):
        g2 = g.reshape(bs, o, h * wd)
        gw = np.zeros_like(w2d)
        gxp = np.zeros_like(xp) if need_gx else None
        for lo, hi in _im2col_chunks(bs, c * kh * kw, h * wd):
            cols = _build_cols(xp[lo:hi], kh, kw, h, wd)
            gw += np.tensordot(g2[lo:hi], cols, axes=([0, 2], [0, 2]))
            if not need_gx:
                continue
            gcols = np.matmul(w2d.T, g2[lo:hi]).reshape(hi - lo, c, kh, kw, h * wd)
            for i in range(kh):
                for j in range(kw):
                    gxp[lo:hi, :, i : i + h, j : j + wd] += gcols[:, :, i, j, :].reshape(
                        hi - lo, c, h, wd
                    )
        w._accumulate(gw.reshape(w.data.shape))
        b._accumulate(g.sum(axis=(0, 2, 3)))
        if need_gx:
            x._accumulate(gxp[:, :, ph : ph + h, pw : pw + wd] if (ph or pw) else gxp)

    return _node(out_data, (x, w, b), backward)


def maxpool2d(x, pool):
    """Non-overlapping max pooling with window `pool` = (pf, pt)."""
    pf, pt = pool
    if pf == 1 and pt == 1:
        return as_tensor(x)
    x = as_tensor(x)
    bs, c, h, w = x.data.shape
    if h % pf or w % pt:
        raise ShapeError(f"pool {pool} does not divide spatial dims ({h}, {w})")
    hh, ww = h // pf, w // pt
    windows = (
        x.data.reshape(bs, c, hh, pf, ww, pt).transpose(0, 1, 2, 4, 3, 5).reshape(bs, c, hh, ww, pf * pt)
    )
    arg = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((bs, c, hh, ww, pf * pt), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(bs, c, hh, ww, pf, pt).transpose(0, 1, 2, 4, 3, 5).reshape(bs, c, h, w)
        x._accumulate(gx)

    return _node(out_data, (x,), backward)


def maxpool3x3_same(x):
    """3x3 max pooling with stride 1 and 'same' extent (inception pool branch)."""
    x = as_tensor(x)
    bs, c, h, w = x.data.shape
    neg = np.finfo(x.data.dtype).min
    xp = np.full((bs, c, h + 2, w + 2), neg, dtype=x.data.dtype)
    xp[:, :, 1 : 1 + h, 1 : 1 + w] = x.data
    out_data = np.full((bs, c, h, w), neg, dtype=x.data.dtype)
    for i in range(3):
        for j in range(3):
            np.maximum(out_data, xp[:, :, i : i + h, j : j + w], out=out_data)

    def backward(g):
        gxp = np.zeros_like(xp)
        taken = np.zeros((bs, c, h, w), dtype=bool)
        for i in range(3):
            for j in range(3):
                view = xp[:, :, i : i + h, j : j + w]
                winner = (view == out_data) & ~taken
                taken |= winner
                gxp[:, :, i : i + h, j : j + w] += g * winner
        x._accumulate(gxp[:, :, 1 : 1 + h, 1 : 1 + w])

    return _node(out_data, (x,), backward)
