"""Dense tensors with tape-based reverse-mode differentiation.

Only the layer set a DS-CNN keyword spotter needs is provided: 2D and
depthwise convolutions (NHWC), batch normalization, ReLU, global average
pooling, affine layers, an embedding lookup, the elementwise fusion operators
and softmax cross-entropy.

Values are 32-bit by default. Passing ``dtype=np.float64`` to the leaves gives a
64-bit build of the same graph, which the gradient checker relies on.
"""
from __future__ import annotations

import warnings
from contextlib import contextmanager

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand extents are incompatible.

    ``dim`` names the offending dimension (e.g. ``"input channels"``).
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.array(data, dtype=dtype or DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def _result(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar", "output")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
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
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediates are not needed once propagated
                if node is not self:
                    node.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


class FrozenParameterWarning(UserWarning):
    pass


class Parameter(Tensor):
    """A named trainable leaf.

    ``state`` is the optimizer slot. ``row_mask``, when set, limits updates to the
    listed rows (used to adapt a single speaker's embedding).
    """

    def __init__(self, data, trainable=True, dtype=None, name=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype, name=name)
        self.state = None
        self.row_mask = None

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(v):
    if np.isscalar(v):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def _out_extent(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def _pad_nhwc(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _windows(xp, kh, kw, sh, sw, ho, wo):
    # (N, Ho, Wo, C, Kh, Kw) strided view
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return v[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def conv2d(x, kernel, bias, stride=(1, 1), padding=(0, 0)):
    """Cross-correlation of an NHWC input with a (Kh, Kw, Ci, Co) kernel."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects a 4-D NHWC input and a 4-D kernel", "rank")
    n, h, w, ci = x.shape
    kh, kw, kci, co = kernel.shape
    if kci != ci:
        raise ShapeError(f"input channels {ci} != kernel input channels {kci}", "input channels")
    if bias.shape != (co,):
        raise ShapeError(f"bias shape {bias.shape} != ({co},)", "output channels")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError("stride components must be >= 1")
    ho, wo = _out_extent(h, kh, sh, ph), _out_extent(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}", "spatial")

    xp = _pad_nhwc(x.data, ph, pw)
    cols = _windows(xp, kh, kw, sh, sw, ho, wo).transpose(0, 1, 2, 4, 5, 3)
    cols = cols.reshape(n * ho * wo, kh * kw * ci)
    wmat = kernel.data.reshape(kh * kw * ci, co)
    out = (cols @ wmat + bias.data).reshape(n, ho, wo, co)

    def backward(g):
        g2 = g.reshape(-1, co)
        if kernel.requires_grad:
            kernel._accumulate((cols.T @ g2).reshape(kernel.shape))
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, ci)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[:, :, :, i, j]
            x._accumulate(dxp[:, ph : ph + h, pw : pw + w])

    return Tensor._result(out, (x, kernel, bias), backward)


def depthwise_conv2d(x, kernel, bias, stride=(1, 1), padding=(0, 0)):
    """Per-channel convolution with a (Kh, Kw, C) kernel."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 3:
        raise ShapeError("depthwise_conv2d expects NHWC input and a (Kh, Kw, C) kernel", "rank")
    n, h, w, c = x.shape
    kh, kw, kc = kernel.shape
    if kc != c:
        raise ShapeError(f"input channels {c} != kernel channels {kc}", "channels")
    if bias.shape != (c,):
        raise ShapeError(f"bias shape {bias.shape} != ({c},)", "channels")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError("stride components must be >= 1")
    ho, wo = _out_extent(h, kh, sh, ph), _out_extent(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}", "spatial")

    xp = _pad_nhwc(x.data, ph, pw)
    k = kernel.data

    def tap(arr, i, j):
        return arr[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]

    out = np.zeros((n, ho, wo, c), dtype=np.result_type(xp, k))
    for i in range(kh):
        for j in range(kw):
            out += tap(xp, i, j) * k[i, j]
    out += bias.data

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 1, 2)))
        if kernel.requires_grad:
            dk = np.empty_like(k)
            for i in range(kh):
                for j in range(kw):
                    dk[i, j] = np.einsum("nhwc,nhwc->c", tap(xp, i, j), g)
            kernel._accumulate(dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    tap(dxp, i, j)[...] += g * k[i, j]
            x._accumulate(dxp[:, ph : ph + h, pw : pw + w])

    return Tensor._result(out, (x, kernel, bias), backward)


def batchnorm(x, gamma, beta, training, running_mean, running_var, momentum=0.1, eps=1e-5):
    """Batch normalization over every axis but the last (channels).

    In training mode the batch moments (biased variance) normalize the input and
    ``running_mean`` / ``running_var`` (numpy arrays) are updated in place with an
    exponential moving average; the running variance uses the unbiased estimate.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine parameters must have shape ({c},)", "channels")
    axes = tuple(range(x.data.ndim - 1))
    m = x.data.size // c if c else 0
    if m == 0 or c == 0:
        raise ShapeError("batchnorm on an empty batch or spatial extent", "batch")

    if training:
        if m < 2:
            raise ShapeError("training-mode batchnorm needs at least 2 values per channel", "batch")
        # moments accumulate in float64; float32 sums drift on offset channels
        mean = x.data.mean(axis=axes, dtype=np.float64)
        xc = x.data - mean
        var = (xc * xc).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xc * inv_std).astype(x.data.dtype, copy=False)
        inv_std = inv_std.astype(x.data.dtype, copy=False)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += (momentum * mean).astype(running_mean.dtype)
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += (momentum * var * (m / (m - 1))).astype(running_var.dtype)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv_std
        xhat = xhat.astype(x.data.dtype, copy=False)
        inv_std = inv_std.astype(x.data.dtype, copy=False)
    out = xhat * gamma.data + beta.data

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                s1 = dxhat.sum(axis=axes)
                s2 = (dxhat * xhat).sum(axis=axes)
                x._accumulate((inv_std / m) * (m * dxhat - s1 - xhat * s2))
            else:
                x._accumulate(dxhat * inv_std)

    return Tensor._result(out, (x, gamma, beta), backward)


_relu_masks = None
_relu_pins = None


@contextmanager
def record_relu_masks():
    """Collect the activity mask of every ReLU evaluated inside the block."""
    global _relu_masks
    prev, _relu_masks = _relu_masks, []
    try:
        yield _relu_masks
    finally:
        _relu_masks = prev


@contextmanager
def pin_relu_masks(masks):
    """Make the ReLUs evaluated inside the block reuse ``masks`` in order.

    Used by finite differencing to stay on one smooth piece of a network.
    """
    global _relu_pins
    prev, _relu_pins = _relu_pins, iter(masks)
    try:
        yield
    finally:
        _relu_pins = prev


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0 if _relu_pins is None else next(_relu_pins)
    if _relu_masks is not None:
        _relu_masks.append(mask)
    out = np.where(mask, x.data, 0).astype(x.data.dtype, copy=False)

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._result(out, (x,), backward)


def avgpool_global(x):
    """Per-channel spatial mean: (N, H, W, C) -> (N, C)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("avgpool_global expects NHWC input", "rank")
    n, h, w, c = x.shape
    if h * w == 0:
        raise ShapeError("avgpool_global on an empty spatial extent", "spatial")
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, None, None, :] / (h * w), x.shape))

    return Tensor._result(out, (x,), backward)


def linear(x, weight, bias):
    """Affine map of an (N, F) input with an (F, K) weight."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects (N, F) input and (F, K) weight", "rank")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"input features {x.shape[1]} != weight rows {weight.shape[0]}", "features")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[1]},)", "outputs")
    out = x.data @ weight.data + bias.data

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)

    return Tensor._result(out, (x, weight, bias), backward)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ", "width")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return Tensor._result(a.data + b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return Tensor._result(a.data * b.data, (a, b), backward)


def concat(a, b):
    """Concatenate two (N, ·) tensors along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: leading shapes {a.shape[:-1]} and {b.shape[:-1]} differ", "batch")
    split = a.shape[-1]

    def backward(g):
        a._accumulate(g[..., :split])
        b._accumulate(g[..., split:])

    return Tensor._result(np.concatenate([a.data, b.data], axis=-1), (a, b), backward)


def embedding(table, rows):
    """Gather rows of a (R, n) table; the gradient scatters back to used rows only."""
    table = as_tensor(table)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= table.shape[0]):
        raise IndexError(f"embedding row out of range [0, {table.shape[0]})")
    out = table.data[rows]

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, rows, g)
        table._accumulate(dt)

    return Tensor._result(out, (table,), backward)


def weighted_sum(x, weights):
    """Scalar <x, weights> with constant weights; handy as a probe loss."""
    x = as_tensor(x)
    wts = np.asarray(weights, dtype=x.data.dtype)
    _same_shape(x, Tensor(wts, dtype=wts.dtype), "weighted_sum")

    def backward(g):
        x._accumulate(g * wts)

    return Tensor._result(np.array((x.data * wts).sum(), dtype=x.data.dtype), (x,), backward)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError("logits must be (N, K)", "rank")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)", "batch")
    if n == 0:
        raise ShapeError("cross-entropy over an empty batch", "batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), labels] - logsumexp
    loss = np.array(-logp.mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(g * p / n)

    return Tensor._result(loss, (logits,), backward)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def warn_frozen(param):
    warnings.warn(f"optimizer step on frozen parameter {param.name!r} ignored", FrozenParameterWarning, stacklevel=3)
