"""Differentiable operations.

Binary elementwise ops require equal shapes; the only implicit broadcast is a
python scalar against a tensor.  Anything else goes through
:func:`broadcast_to`, which is explicit and differentiable.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import DTYPE, Function, ShapeError, Variable, as_variable


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


# -- elementwise --------------------------------------------------------------


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _same_shape("add", a, b)
        return a + b

    def backward(self, g):
        return g, g


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _same_shape("sub", a, b)
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _same_shape("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _same_shape("div", a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        return g / self.b, -g * self.a / (self.b * self.b)


class Scale(Function):
    name = "scale"

    def __init__(self, factor: float = 1.0):
        self.factor = float(factor)

    def forward(self, a):
        return a * self.factor

    def backward(self, g):
        return (g * self.factor,)


class AddScalar(Function):
    name = "add_scalar"

    def __init__(self, c: float = 0.0):
        self.c = float(c)

    def forward(self, a):
        return a + self.c

    def backward(self, g):
        return (g,)


class Tanh(Function):
    name = "tanh"

    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        return (g * (1.0 - self.out * self.out),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, a):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, g):
        # subgradient 0 at exactly 0
        return (np.where(self.mask, g, 0.0),)


class Softplus(Function):
    name = "softplus"

    def forward(self, a):
        self.a = a
        return np.logaddexp(0.0, a)

    def backward(self, g):
        return (g * 0.5 * (1.0 + np.tanh(0.5 * self.a)),)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise ValueError("log of a non-positive value")
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, a):
        if np.any(a < 0):
            raise ValueError("sqrt of a negative value")
        self.out = np.sqrt(a)
        return self.out

    def backward(self, g):
        return (g * 0.5 / self.out,)


class Square(Function):
    name = "square"

    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, g):
        return (2.0 * g * self.a,)


class SmoothL1(Function):
    """Elementwise D(x): 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""

    name = "smooth_l1"

    def forward(self, a):
        self.a = a
        ab = np.abs(a)
        return np.where(ab < 1.0, 0.5 * a * a, ab - 0.5)

    def backward(self, g):
        return (g * np.clip(self.a, -1.0, 1.0),)


# -- reductions and shape ----------------------------------------------------


class Sum(Function):
    name = "sum"

    def __init__(self, axes=None, keepdims: bool = False):
        self.axes = axes
        self.keepdims = keepdims

    def forward(self, a):
        self.in_shape = a.shape
        self.ax = _norm_axes(self.axes, a.ndim)
        if any(a.shape[i] == 0 for i in self.ax):
            raise ShapeError("sum over an empty axis")
        return np.sum(a, axis=self.ax, keepdims=self.keepdims)

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.ax)
        return (np.broadcast_to(g, self.in_shape).copy(),)


class Mean(Function):
    name = "mean"

    def __init__(self, axes=None, keepdims: bool = False):
        self.axes = axes
        self.keepdims = keepdims

    def forward(self, a):
        self.in_shape = a.shape
        self.ax = _norm_axes(self.axes, a.ndim)
        self.n = math.prod(a.shape[i] for i in self.ax)
        if self.n == 0:
            raise ShapeError("mean over an empty axis")
        return np.mean(a, axis=self.ax, keepdims=self.keepdims)

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.ax)
        return (np.broadcast_to(g / self.n, self.in_shape).copy(),)


class Max(Function):
    """Max reduction; ties split the gradient evenly."""

    name = "max"

    def __init__(self, axes=None, keepdims: bool = False):
        self.axes = axes
        self.keepdims = keepdims

    def forward(self, a):
        self.ax = _norm_axes(self.axes, a.ndim)
        if any(a.shape[i] == 0 for i in self.ax):
            raise ShapeError("max over an empty axis")
        m = np.max(a, axis=self.ax, keepdims=True)
        hit = a == m
        self.route = hit / np.sum(hit, axis=self.ax, keepdims=True)
        return m if self.keepdims else np.squeeze(m, axis=self.ax)

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.ax)
        return (self.route * g,)


class Reshape(Function):
    name = "reshape"

    def __init__(self, shape: Sequence[int] = (-1,)):
        self.shape = tuple(shape)

    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(self.shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class BroadcastTo(Function):
    name = "broadcast_to"

    def __init__(self, shape: Sequence[int] = ()):
        self.shape = tuple(shape)

    def forward(self, a):
        if a.ndim != len(self.shape):
            raise ShapeError(f"broadcast_to: rank {a.ndim} != target rank {len(self.shape)}")
        self.in_shape = a.shape
        return np.broadcast_to(a, self.shape).copy()

    def backward(self, g):
        ax = tuple(i for i, (s, t) in enumerate(zip(self.in_shape, self.shape)) if s != t)
        return (np.sum(g, axis=ax, keepdims=True) if ax else g,)


class GetItem(Function):
    name = "getitem"

    def __init__(self, index=()):
        self.index = index

    def forward(self, a):
        self.in_shape = a.shape
        return np.array(a[self.index])

    def backward(self, g):
        out = np.zeros(self.in_shape, dtype=DTYPE)
        np.add.at(out, self.index, g)
        return (out,)


class Concat(Function):
    name = "concat"

    def __init__(self, axis: int = 0):
        self.axis = axis

    def forward(self, *arrays):
        self.sizes = [a.shape[self.axis] for a in arrays]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


# -- convolution and resampling ------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    span = dilation * (k - 1) + 1
    return (n + 2 * padding - span) // stride + 1


class Conv2d(Function):
    """Batched dilated cross-correlation, NCHW input and OIHW kernel."""

    name = "conv2d"

    def __init__(self, stride: int = 1, dilation: int = 1, padding: int = 0):
        if stride < 1 or dilation < 1 or padding < 0:
            raise ValueError("conv2d needs stride >= 1, dilation >= 1, padding >= 0")
        self.stride, self.dilation, self.padding = stride, dilation, padding

    def forward(self, x, w):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape}, {w.shape}")
        n, c, h, wd = x.shape
        o, ci, kh, kw = w.shape
        if ci != c:
            raise ShapeError(f"conv2d: input channels {c} != kernel input channels {ci}")
        s, d, p = self.stride, self.dilation, self.padding
        ho = conv_output_size(h, kh, s, d, p)
        wo = conv_output_size(wd, kw, s, d, p)
        if ho < 1:
            raise ShapeError(f"conv2d: height {h} too small for kernel {kh} at dilation {d}")
        if wo < 1:
            raise ShapeError(f"conv2d: width {wd} too small for kernel {kw} at dilation {d}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=DTYPE)
        for i in range(kh):
            r0 = i * d
            for j in range(kw):
                c0 = j * d
                cols[:, :, i, j] = xp[:, :, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s]
        self.cols, self.w, self.xp_shape = cols, w, xp.shape
        out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))  # O,N,Ho,Wo
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(self, g):
        s, d, p = self.stride, self.dilation, self.padding
        _, _, kh, kw = self.w.shape
        ho, wo = g.shape[2], g.shape[3]
        gw = np.tensordot(g, self.cols, axes=([0, 2, 3], [0, 4, 5]))
        dcols = np.tensordot(self.w, g, axes=([0], [1]))  # C,kh,kw,N,Ho,Wo
        gxp = np.zeros(self.xp_shape, dtype=DTYPE)
        for i in range(kh):
            r0 = i * d
            for j in range(kw):
                c0 = j * d
                gxp[:, :, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s] += dcols[
                    :, i, j
                ].transpose(1, 0, 2, 3)
        gx = gxp[:, :, p : gxp.shape[2] - p, p : gxp.shape[3] - p] if p else gxp
        return gx, gw


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Aligned-corner interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    for i in range(n_out):
        num = i * (n_in - 1)
        i0 = min(num // (n_out - 1), n_in - 2)
        frac = num / (n_out - 1) - i0
        m[i, i0] += 1.0 - frac
        m[i, i0 + 1] += frac
    return m


class UpsampleBilinear(Function):
    """Separable bilinear upsampling of the last two axes, aligned corners."""

    name = "upsample_bilinear"

    def __init__(self, size: tuple[int, int] = (1, 1)):
        self.size = tuple(size)

    def forward(self, x):
        h, w = x.shape[-2:]
        th, tw = self.size
        if th < h or tw < w:
            raise ShapeError(f"upsample_bilinear cannot downscale {h}x{w} to {th}x{tw}")
        self.ah = bilinear_matrix(h, th)
        self.aw = bilinear_matrix(w, tw)
        return np.matmul(np.matmul(self.ah, x), self.aw.T)

    def backward(self, g):
        return (np.matmul(np.matmul(self.ah.T, g), self.aw),)


# -- fused losses --------------------------------------------------------------


class SoftmaxCrossEntropy(Function):
    """Mean negative log-likelihood over labelled pixels.

    ``labels`` holds 1..K for class ids and 0 for ignored pixels; logits are
    ``N x K x H x W``.  The label array is a constructor argument, so the only
    differentiable operand is the logits tensor.
    """

    name = "softmax_cross_entropy"

    def __init__(self, labels: np.ndarray | None = None):
        self.labels = labels

    def forward(self, logits):
        labels = np.asarray(self.labels)
        n, k, h, w = logits.shape
        if labels.shape != (n, h, w):
            raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
        if labels.min(initial=0) < 0 or labels.max(initial=0) > k:
            raise ValueError(f"label out of range 0..{k}")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        valid = labels > 0
        self.count = int(valid.sum())
        self.valid = valid
        self.onehot = np.zeros_like(logits)
        idx = np.nonzero(valid)
        self.onehot[idx[0], labels[idx].astype(np.intp) - 1, idx[1], idx[2]] = 1.0
        self.prob = np.exp(logp)
        if self.count == 0:
            return np.array(0.0)
        return np.array(-(logp * self.onehot).sum() / self.count)

    def backward(self, g):
        if self.count == 0:
            return (np.zeros_like(self.prob),)
        d = (self.prob - self.onehot) * self.valid[:, None, :, :] / self.count
        return (g * d,)


# -- functional wrappers -------------------------------------------------------


def _coerce_pair(a, b):
    return as_variable(a), as_variable(b)


def add(a, b) -> Variable:
    if not isinstance(b, Variable) and np.ndim(b) == 0:
        return AddScalar.apply(as_variable(a), c=float(b))
    if not isinstance(a, Variable) and np.ndim(a) == 0:
        return AddScalar.apply(as_variable(b), c=float(a))
    return Add.apply(*_coerce_pair(a, b))


def sub(a, b) -> Variable:
    if not isinstance(b, Variable) and np.ndim(b) == 0:
        return AddScalar.apply(as_variable(a), c=-float(b))
    return Sub.apply(*_coerce_pair(a, b))


def mul(a, b) -> Variable:
    if not isinstance(b, Variable) and np.ndim(b) == 0:
        return Scale.apply(as_variable(a), factor=float(b))
    if not isinstance(a, Variable) and np.ndim(a) == 0:
        return Scale.apply(as_variable(b), factor=float(a))
    return Mul.apply(*_coerce_pair(a, b))


def div(a, b) -> Variable:
    if not isinstance(b, Variable) and np.ndim(b) == 0:
        return Scale.apply(as_variable(a), factor=1.0 / float(b))
    return Div.apply(*_coerce_pair(a, b))


def scale(a, factor: float) -> Variable:
    return Scale.apply(as_variable(a), factor=factor)


def tanh(a) -> Variable:
    return Tanh.apply(as_variable(a))


def sigmoid(a) -> Variable:
    return Sigmoid.apply(as_variable(a))


def relu(a) -> Variable:
    return Relu.apply(as_variable(a))


def softplus(a) -> Variable:
    return Softplus.apply(as_variable(a))


def exp(a) -> Variable:
    return Exp.apply(as_variable(a))


def log(a) -> Variable:
    return Log.apply(as_variable(a))


def sqrt(a) -> Variable:
    return Sqrt.apply(as_variable(a))


def square(a) -> Variable:
    return Square.apply(as_variable(a))


def smooth_l1(a) -> Variable:
    return SmoothL1.apply(as_variable(a))


def identity(a) -> Variable:
    return as_variable(a)


def elementwise(kind: str, *operands, factor: float = 1.0) -> Variable:
    """Dispatch by name: add, sub, mul, tanh, sigmoid, relu, scale."""
    unary = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}
    binary = {"add": add, "sub": sub, "mul": mul}
    if kind in unary:
        return unary[kind](*operands)
    if kind in binary:
        return binary[kind](*operands)
    if kind == "scale":
        return scale(operands[0], factor)
    raise ValueError(f"unknown elementwise op {kind!r}")


def sum(a, axes=None, keepdims: bool = False) -> Variable:  # noqa: A001
    return Sum.apply(as_variable(a), axes=axes, keepdims=keepdims)


def mean(a, axes=None, keepdims: bool = False) -> Variable:
    return Mean.apply(as_variable(a), axes=axes, keepdims=keepdims)


def max(a, axes=None, keepdims: bool = False) -> Variable:  # noqa: A001
    return Max.apply(as_variable(a), axes=axes, keepdims=keepdims)


def reduce(kind: str, a, axes=None, keepdims: bool = False) -> Variable:
    fns = {"sum": sum, "mean": mean, "max": max}
    if kind not in fns:
        raise ValueError(f"unknown reduction {kind!r}")
    return fns[kind](a, axes=axes, keepdims=keepdims)


def reshape(a, shape) -> Variable:
    return Reshape.apply(as_variable(a), shape=shape)


def broadcast_to(a, shape) -> Variable:
    a = as_variable(a)
    if a.shape == tuple(shape):
        return a
    return BroadcastTo.apply(a, shape=shape)


def getitem(a, index) -> Variable:
    return GetItem.apply(as_variable(a), index=index)


def concat(arrays, axis: int = 0) -> Variable:
    return Concat.apply(*(as_variable(a) for a in arrays), axis=axis)


def conv2d(x, kernel, stride: int = 1, dilation: int = 1, padding: int = 0) -> Variable:
    """Cross-correlation with ``dilation - 1`` holes between taps.

    Accepts ``C x H x W`` or ``N x C x H x W`` input; the output has the same
    rank as the input.
    """
    x, kernel = as_variable(x), as_variable(kernel)
    if x.ndim == 3:
        out = Conv2d.apply(reshape(x, (1,) + x.shape), kernel, stride=stride, dilation=dilation, padding=padding)
        return reshape(out, out.shape[1:])
    return Conv2d.apply(x, kernel, stride=stride, dilation=dilation, padding=padding)


def add_channel_bias(x, bias) -> Variable:
    """Add a per-channel bias to a ``N x C x H x W`` (or ``C x H x W``) map."""
    x, bias = as_variable(x), as_variable(bias)
    c_axis = x.ndim - 3
    if bias.shape != (x.shape[c_axis],):
        raise ShapeError(f"bias shape {bias.shape} does not match {x.shape[c_axis]} channels")
    view = [1] * x.ndim
    view[c_axis] = x.shape[c_axis]
    return add(x, broadcast_to(reshape(bias, view), x.shape))


def upsample_bilinear(x, size: tuple[int, int]) -> Variable:
    return UpsampleBilinear.apply(as_variable(x), size=size)


def softmax_cross_entropy(logits, labels: np.ndarray) -> Variable:
    return SoftmaxCrossEntropy.apply(as_variable(logits), labels=np.asarray(labels))
