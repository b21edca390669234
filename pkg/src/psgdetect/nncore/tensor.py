"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray plus an optional gradient and a closure
that routes incoming gradients to its parents.  Op functions below build the
graph eagerly; ``Tensor.backward`` replays it in reverse topological order.
The walk is iterative because recurrent graphs are far deeper than the
default recursion limit.

Only the operations the detection network needs live here: elementwise
arithmetic, matmul, 2-D cross-correlation, pooling, softmax, and the
slice/stack plumbing used by the recurrent block and the losses.

Dtype policy: caller-controlled and preserved.  Gradient tests run the graph
in float64; training runs it in float32.  Scalar operands adopt the tensor's
dtype so float32 graphs never silently promote to float64.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UsageError(RuntimeError):
    """An op was called outside its contract (e.g. backward on a non-scalar)."""


class StateError(RuntimeError):
    """A stateful layer was used before its state was initialized."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad."""
        if self.data.size != 1:
            raise UsageError(
                f"backward needs a scalar loss, got shape {self.data.shape}"
            )
        # Iterative DFS postorder.  Nodes are marked visited when first
        # popped (not when pushed): push-time marking can emit a node before
        # an ancestor that another consumer still needs, which would run its
        # backward too early.
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, parents_done = stack.pop()
            if parents_done:
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

    # Operator sugar; the actual derivatives live in the module functions.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, neg(_coerce(other, self)))

    def __rsub__(self, other):
        return add(neg(self), _coerce(other, self))

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class Parameter:
    """A named, optionally frozen weight.

    Frozen parameters take no part in the tape (requires_grad is False), so
    they accumulate no gradient and the optimizer skips them.
    """

    def __init__(self, name: str, data, frozen: bool = False):
        self.name = name
        self.tensor = Tensor(np.array(data), requires_grad=not frozen)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def frozen(self) -> bool:
        return not self.tensor.requires_grad

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.tensor.requires_grad = not value
        if value:
            self.tensor.grad = None

    def __repr__(self):
        state = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name!r}, shape={self.data.shape}, {state})"


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along the axes broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * out / b.data, b.data.shape))

    return _make(out, (a, b), backward)


def pow_const(a: Tensor, exponent) -> Tensor:
    c = float(exponent)

    def backward(g):
        if c == 0.0:
            return
        _accum(a, g * c * a.data ** (c - 1.0))

    return _make(a.data ** c, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _make(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Stable logistic: exp of a non-positive argument on both branches.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), backward)


def clip_min(a: Tensor, low: float) -> Tensor:
    """max(a, low); gradient passes only where a was not clamped."""
    mask = a.data >= low

    def backward(g):
        _accum(a, g * mask)

    return _make(np.maximum(a.data, low), (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(out, (a,), backward)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)

    def backward(g):
        gg = np.asarray(g) / count
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b with a of shape (..., n, k) and b strictly 2-D (k, m)."""
    if b.data.ndim != 2:
        raise ShapeError(f"matmul right operand must be 2-D, got {b.data.shape}")
    if a.data.ndim < 2 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    k, m = b.data.shape

    def backward(g):
        _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, m))

    return _make(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def _has_index_arrays(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in parts)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    fancy = _has_index_arrays(key)

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        if fancy:
            # Repeated indices must accumulate, so use unbuffered add.
            np.add.at(a.grad, key, g)
        else:
            a.grad[key] += g

    return _make(out, (a,), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for t, piece in zip(tensors, np.moveaxis(g, axis, 0)):
            _accum(t, piece)

    return _make(out, tuple(tensors), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.shape[axis] < 1:
        raise ShapeError("softmax needs a non-empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - inner))

    return _make(out, (a,), backward)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=(1, 1),
    padding=((0, 0), (0, 0)),
) -> Tensor:
    """2-D cross-correlation, NCHW layout, explicit per-edge zero padding.

    Output spatial size is floor((H_padded - kh)/sh) + 1 (same for width).
    Implemented as a sum over kernel offsets of strided-view contractions,
    which keeps both passes vectorized without an im2col buffer.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (N,C,H,W), got {x.data.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got {weight.data.shape}")
    n, cin, _, _ = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}"
        )
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(
            f"conv2d bias shape {bias.data.shape} != ({cout},)"
        )
    sh, sw = stride
    (ph0, ph1), (pw0, pw1) = padding
    if ph0 or ph1 or pw0 or pw1:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    else:
        xp = x.data
    hp, wp = xp.shape[2], xp.shape[3]
    if kh > hp or kw > wp:
        raise ShapeError(
            f"kernel ({kh},{kw}) larger than padded input ({hp},{wp})"
        )
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    out = np.zeros((n, cout, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
            part = np.tensordot(xs, weight.data[:, :, i, j], axes=([1], [1]))
            out += np.moveaxis(part, 3, 1)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        need_x = x.requires_grad
        need_w = weight.requires_grad
        gxp = np.zeros_like(xp) if need_x else None
        gw = np.zeros_like(weight.data) if need_w else None
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + sh * ho, sh)
                cols = slice(j, j + sw * wo, sw)
                if need_w:
                    xs = xp[:, :, rows, cols]
                    gw[:, :, i, j] = np.tensordot(
                        g, xs, axes=([0, 2, 3], [0, 2, 3])
                    )
                if need_x:
                    part = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, rows, cols] += np.moveaxis(part, 3, 1)
        if need_w:
            _accum(weight, gw)
        if need_x:
            _accum(x, gxp[:, :, ph0 : hp - ph1, pw0 : wp - pw1])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def avgpool1d(a: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Average pooling along the last axis."""
    stride = kernel if stride is None else stride
    width = a.data.shape[-1]
    if kernel < 1 or kernel > width:
        raise ShapeError(f"pool kernel {kernel} invalid for width {width}")
    n_out = (width - kernel) // stride + 1
    out = np.zeros(a.data.shape[:-1] + (n_out,), dtype=a.data.dtype)
    for j in range(kernel):
        out += a.data[..., j : j + stride * n_out : stride]
    out /= kernel

    def backward(g):
        ga = np.zeros_like(a.data)
        gs = g / kernel
        for j in range(kernel):
            ga[..., j : j + stride * n_out : stride] += gs
        _accum(a, ga)

    return _make(out, (a,), backward)
