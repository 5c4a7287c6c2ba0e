"""
Differentiable operations for the tensor engine.

Each operation is a ``Function`` subclass with a NumPy forward pass and an
analytic backward pass, plus a lowercase wrapper that accepts tensors or
constants. Convolutions are valid (unpadded) cross-correlations computed on
an im2col window view.
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from patchcert.errors import DimensionError
from patchcert.tensor import Function, Tensor, as_tensor

Operand = Union[Tensor, float, int, np.ndarray]


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            self.unbroadcast(grad, self.shapes[0]),
            self.unbroadcast(grad, self.shapes[1]),
        )


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (-grad,)


class Abs(Function):
    """|a| with subgradient 0 at 0."""

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.sign,)


class ReLU(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.active = a > 0
        return np.where(self.active, a, 0).astype(a.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.active,)


# ----------------------------------------------------------------------
# Shape and indexing
# ----------------------------------------------------------------------


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: Sequence[int] = ()) -> np.ndarray:
        self.original = a.shape
        try:
            return a.reshape(tuple(shape))
        except ValueError:
            raise DimensionError("cannot reshape", a.shape, tuple(shape)) from None

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad.reshape(self.original),)


class Take(Function):
    """Gather entries along one axis; repeated indices accumulate on backward."""

    def forward(self, a: np.ndarray, indices: np.ndarray = None, axis: int = 0) -> np.ndarray:
        self.shape = a.shape
        self.indices = np.asarray(indices, dtype=np.int64)
        self.axis = axis % a.ndim
        return np.take(a, self.indices, axis=self.axis)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        out = np.zeros(self.shape, dtype=grad.dtype)
        index = (slice(None),) * self.axis + (self.indices,)
        np.add.at(out, index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


# ----------------------------------------------------------------------
# Reductions
# ----------------------------------------------------------------------


class Sum(Function):
    def forward(
        self, a: np.ndarray, axis: Optional[int] = None, keepdims: bool = False
    ) -> np.ndarray:
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class _ArgReduce(Function):
    """Routes the whole gradient to the first attaining index."""

    picker = staticmethod(np.argmin)

    def forward(self, a: np.ndarray, axis: int = 0) -> np.ndarray:
        self.shape = a.shape
        self.axis = axis % a.ndim
        self.index = np.expand_dims(self.picker(a, axis=self.axis), self.axis)
        return np.take_along_axis(a, self.index, axis=self.axis).squeeze(self.axis)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.put_along_axis(out, self.index, np.expand_dims(grad, self.axis), axis=self.axis)
        return (out,)


class Min(_ArgReduce):
    picker = staticmethod(np.argmin)


class Max(_ArgReduce):
    picker = staticmethod(np.argmax)


class TopKSum(Function):
    """Sum of the k largest entries along the last axis."""

    def forward(self, a: np.ndarray, k: int = 1) -> np.ndarray:
        self.shape = a.shape
        self.k = k
        if k == 0:
            return np.zeros(a.shape[:-1], dtype=a.dtype)
        self.index = np.argpartition(-a, k - 1, axis=-1)[..., :k]
        return np.take_along_axis(a, self.index, axis=-1).sum(axis=-1)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        out = np.zeros(self.shape, dtype=grad.dtype)
        if self.k:
            values = np.broadcast_to(grad[..., None], self.index.shape)
            np.put_along_axis(out, self.index, values, axis=-1)
        return (out,)


# ----------------------------------------------------------------------
# Linear maps
# ----------------------------------------------------------------------


def _wide(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64) if a.dtype == np.float32 else a


def _narrow(out: np.ndarray, *inputs: np.ndarray) -> np.ndarray:
    """Round a widened product back to the inputs' dtype."""
    return out.astype(np.result_type(*inputs), copy=False)


class Matmul(Function):
    """Batched matrix product with NumPy broadcasting over leading axes."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError("matmul inner dimensions disagree", a.shape, b.shape)
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return self.unbroadcast(ga, self.a.shape), self.unbroadcast(gb, self.b.shape)


class Affine(Function):
    """
    y = x Wᵀ + b over the last axis of x.

    Float32 products accumulate in float64 and are rounded once, so each
    output row is the same whatever rows share its batch.
    """

    def forward(self, x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
        if w.ndim != 2 or x.shape[-1] != w.shape[1]:
            raise DimensionError("affine input does not match weight", x.shape, w.shape)
        if b is not None and b.shape != (w.shape[0],):
            raise DimensionError("affine bias does not match weight", b.shape, w.shape)
        self.x, self.w = x, w
        out = _wide(x) @ _wide(w).T
        if b is None:
            return _narrow(out, x, w)
        return _narrow(out + _wide(b), x, w, b)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        flat_grad = grad.reshape(-1, self.w.shape[0])
        flat_x = self.x.reshape(-1, self.w.shape[1])
        gx = grad @ self.w
        gw = flat_grad.T @ flat_x
        if len(self.inputs) == 3:
            return gx, gw, flat_grad.sum(axis=0)
        return gx, gw


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Ho, Wo, kh, kw) view of every receptive field."""
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


class Conv2d(Function):
    """Valid cross-correlation of (N, C, H, W) with (O, C, kh, kw), accumulated like Affine."""

    def forward(
        self,
        x: np.ndarray,
        kernel: np.ndarray,
        b: Optional[np.ndarray] = None,
        stride: int = 1,
    ) -> np.ndarray:
        if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
            raise DimensionError("conv2d channels disagree", x.shape, kernel.shape)
        kh, kw = kernel.shape[2:]
        if kh > x.shape[2] or kw > x.shape[3]:
            raise DimensionError("conv2d kernel larger than input", kernel.shape, x.shape)
        if stride < 1:
            raise DimensionError(f"conv2d stride must be positive, got {stride}")
        if b is not None and b.shape != (kernel.shape[0],):
            raise DimensionError("conv2d bias does not match kernel", b.shape, kernel.shape)
        self.x, self.kernel, self.stride = x, kernel, stride
        cols = _windows(_wide(x), kh, kw, stride)
        out = np.tensordot(cols, _wide(kernel), axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if b is None:
            return np.ascontiguousarray(_narrow(out, x, kernel))
        out = out + _wide(b).reshape(1, -1, 1, 1)
        return np.ascontiguousarray(_narrow(out, x, kernel, b))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        kh, kw = self.kernel.shape[2:]
        s = self.stride
        ho, wo = grad.shape[2:]
        cols = _windows(self.x, kh, kw, s)
        gk = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.zeros(self.x.shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, self.kernel[:, :, i, j], axes=([1], [0]))
                gx[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += (
                    contrib.transpose(0, 3, 1, 2)
                )
        if len(self.inputs) == 3:
            return gx, gk, grad.sum(axis=(0, 2, 3))
        return gx, gk


class Pad2d(Function):
    """Zero padding on both spatial axes."""

    def forward(self, x: np.ndarray, pad: int = 0) -> np.ndarray:
        self.pad = pad
        self.hw = x.shape[2:]
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        p, (h, w) = self.pad, self.hw
        return (grad[:, :, p : p + h, p : p + w],)


class Crop2d(Function):
    def forward(
        self, x: np.ndarray, top: int = 0, left: int = 0, height: int = 0, width: int = 0
    ) -> np.ndarray:
        if top + height > x.shape[2] or left + width > x.shape[3]:
            raise DimensionError("crop window exceeds input", (height, width), x.shape)
        self.shape = x.shape
        self.window = (slice(None), slice(None), slice(top, top + height), slice(left, left + width))
        return x[self.window].copy()

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        out = np.zeros(self.shape, dtype=grad.dtype)
        out[self.window] = grad
        return (out,)


class UpsampleNearest(Function):
    def forward(self, x: np.ndarray, scale: int = 2) -> np.ndarray:
        self.scale = scale
        return x.repeat(scale, axis=2).repeat(scale, axis=3)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        n, c, h, w = grad.shape
        s = self.scale
        return (grad.reshape(n, c, h // s, s, w // s, s).sum(axis=(3, 5)),)


# ----------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------


class SoftmaxCrossEntropy(Function):
    """Mean over rows of -log softmax(logits)[target], max-shifted."""

    def forward(self, logits: np.ndarray, target: np.ndarray = None) -> np.ndarray:
        if logits.ndim != 2:
            raise DimensionError("cross entropy expects [batch, labels] logits", logits.shape)
        target = np.asarray(target, dtype=np.int64).reshape(-1)
        if target.shape[0] != logits.shape[0]:
            raise DimensionError("one target per row required", target.shape, logits.shape)
        if np.any(target < 0) or np.any(target >= logits.shape[1]):
            raise IndexError(f"target label out of range [0, {logits.shape[1]})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        total = exp.sum(axis=1, keepdims=True)
        self.probs = exp / total
        self.target = target
        rows = np.arange(logits.shape[0])
        losses = np.log(total[:, 0]) - shifted[rows, target]
        return np.asarray(losses.mean())

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        batch = self.probs.shape[0]
        out = self.probs.copy()
        out[np.arange(batch), self.target] -= 1.0
        return (out * (grad / batch),)


# ----------------------------------------------------------------------
# Wrappers
# ----------------------------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def mul(a: Operand, b: Operand) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def neg(a: Operand) -> Tensor:
    return Neg.apply(as_tensor(a))


def sub(a: Operand, b: Operand) -> Tensor:
    return add(a, neg(b))


def abs_(a: Operand) -> Tensor:
    return Abs.apply(as_tensor(a))


def relu_forward(x: Operand) -> Tensor:
    """Elementwise max(x, 0)."""
    return ReLU.apply(as_tensor(x))


def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(as_tensor(a), shape=tuple(shape))


def take(a: Operand, indices: np.ndarray, axis: int = 0) -> Tensor:
    return Take.apply(as_tensor(a), indices=indices, axis=axis)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def sum_(a: Operand, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(as_tensor(a), axis=axis, keepdims=keepdims)


def mean(a: Operand) -> Tensor:
    a = as_tensor(a)
    return mul(sum_(a), 1.0 / a.size)


def amin(a: Operand, axis: int = 0) -> Tensor:
    """Minimum along ``axis``; ties go to the lowest index."""
    return Min.apply(as_tensor(a), axis=axis)


def amax(a: Operand, axis: int = 0) -> Tensor:
    return Max.apply(as_tensor(a), axis=axis)


def topk_sum(a: Operand, k: int) -> Tensor:
    return TopKSum.apply(as_tensor(a), k=k)


def matmul(a: Operand, b: Operand) -> Tensor:
    return Matmul.apply(as_tensor(a), as_tensor(b))


def affine_forward(x: Operand, w: Operand, b: Optional[Operand] = None) -> Tensor:
    """
    Fully connected layer: y = x Wᵀ + b.

    Args:
        x: Input of shape [..., in]
        w: Weight of shape [out, in]
        b: Optional bias of shape [out]

    Raises:
        DimensionError: If the inner dimensions disagree
    """
    if b is None:
        return Affine.apply(as_tensor(x), as_tensor(w))
    return Affine.apply(as_tensor(x), as_tensor(w), as_tensor(b))


def conv2d_forward(
    x: Operand, kernel: Operand, b: Optional[Operand] = None, stride: int = 1
) -> Tensor:
    """
    Valid 2-D cross-correlation.

    Output extents are floor((h - kh) / stride) + 1 by floor((w - kw) / stride) + 1.

    Raises:
        DimensionError: If the kernel is larger than the input or channels disagree
    """
    if b is None:
        return Conv2d.apply(as_tensor(x), as_tensor(kernel), stride=stride)
    return Conv2d.apply(as_tensor(x), as_tensor(kernel), as_tensor(b), stride=stride)


def pad2d(x: Operand, pad: int) -> Tensor:
    return Pad2d.apply(as_tensor(x), pad=pad)


def crop2d(x: Operand, top: int, left: int, height: int, width: int) -> Tensor:
    return Crop2d.apply(as_tensor(x), top=top, left=left, height=height, width=width)


def upsample_nearest(x: Operand, scale: int = 2) -> Tensor:
    return UpsampleNearest.apply(as_tensor(x), scale=scale)


def softmax_cross_entropy(logits: Operand, target: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """
    Mean softmax cross-entropy of ``logits`` rows against integer targets.

    Raises:
        IndexError: If a target is outside [0, labels)
    """
    return SoftmaxCrossEntropy.apply(as_tensor(logits), target=np.atleast_1d(target))
