"""
Differentiable operators for the toy CNN/MLP models.

Binary elementwise ops broadcast numpy-style; their gradients are summed back
to each operand's shape. `conv2d` is a direct cross-correlation evaluated as
im2col (strided window view) + tensordot; `reference=True` switches the
forward values to a naive nested-loop evaluation kept as the oracle.
"""
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dqss.core.errors import DimensionError
from dqss.tensor.tensor import Tensor, as_tensor, count_op

Operand = Union[Tensor, float, int, np.ndarray]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _operand(value: Operand, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def add(a: Operand, b: Operand) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    count_op("add")
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        name="add",
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    count_op("sub")
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        name="sub",
    )


def mul(a: Operand, b: Operand) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    count_op("mul")
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        name="mul",
    )


def sum(x: Tensor) -> Tensor:
    count_op("sum")
    return Tensor.from_op(
        np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
        lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),),
        name="sum",
    )


def mean(x: Tensor) -> Tensor:
    count_op("mean")
    n = x.size
    return Tensor.from_op(
        np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),),
        name="mean",
    )


def select(x: Tensor, index: int) -> Tensor:
    """x[index] of a 1-d tensor as a 0-d tensor."""
    def _backward(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out,)
    return Tensor.from_op(np.asarray(x.data[index]), (x,), _backward, name="select")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Tensor.from_op(
        x.data.reshape(shape), (x,),
        lambda g: (g.reshape(x.shape),),
        name="reshape",
    )


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    count_op("relu")
    mask = x.data > 0
    return Tensor.from_op(
        np.where(mask, x.data, 0).astype(x.data.dtype), (x,),
        lambda g: (g * mask,),
        name="relu",
    )


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[N,F] @ weight[O,F].T + bias[O]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input features (axis 1) = {x.shape[1]} but weight in-features (axis 1) = {weight.shape[1]}"
        )
    count_op("linear")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def _backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor.from_op(out, parents, _backward, name="linear")


def _conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, padding: int) -> None:
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be N x C x H x W, got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be O x C x Kh x Kw, got shape {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv2d: input channels (axis 1) = {x.shape[1]} but weight in-channels (axis 1) = {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"conv2d: bias shape {bias.shape} does not match weight out-channels (axis 0) = {weight.shape[0]}"
        )
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    kh, kw = weight.shape[2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input (axes 2, 3) {x.shape[2]}x{x.shape[3]}"
        )


def conv2d_naive(x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Nested-loop cross-correlation; slow, used as the oracle."""
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = _conv_output_size(h, kh, stride, padding)
    wo = _conv_output_size(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[b, ic, i * stride + di, j * stride + dj] * weight[oc, ic, di, dj]
                    out[b, oc, i, j] = acc
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # N x C x Ho x Wo x Kh x Kw view, no copy
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, reference: bool = False) -> Tensor:
    _check_conv(x, weight, bias, stride, padding)
    count_op("conv2d")
    kh, kw = weight.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _windows(xp, kh, kw, stride)
    if reference:
        out = conv2d_naive(x.data, weight.data, stride, padding)
    else:
        out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)
    out = out.astype(x.data.dtype, copy=False)
    ho, wo = out.shape[2:]

    def _backward(g):
        grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        grad_xp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                contrib = np.tensordot(g, weight.data[:, :, di, dj], axes=([1], [0]))
                grad_xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
        h, w = x.shape[2:]
        grads = [grad_xp[:, :, padding:padding + h, padding:padding + w], grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor.from_op(out, parents, _backward, name="conv2d")


def _pool_check(x: Tensor, kernel: int, stride: int) -> None:
    if x.ndim != 4:
        raise DimensionError(f"pooling input must be N x C x H x W, got shape {x.shape}")
    if kernel > x.shape[2] or kernel > x.shape[3]:
        raise DimensionError(f"pooling kernel {kernel} larger than input (axes 2, 3) {x.shape[2:]}")


def avg_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    _pool_check(x, kernel, stride)
    count_op("avgpool")
    cols = _windows(x.data, kernel, kernel, stride)
    out = cols.mean(axis=(4, 5)).astype(x.data.dtype)
    ho, wo = out.shape[2:]

    def _backward(g):
        grad = np.zeros_like(x.data)
        share = g / (kernel * kernel)
        for di in range(kernel):
            for dj in range(kernel):
                grad[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += share
        return (grad,)

    return Tensor.from_op(out, (x,), _backward, name="avgpool")


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    _pool_check(x, kernel, stride)
    count_op("maxpool")
    cols = _windows(x.data, kernel, kernel, stride)
    n, c, ho, wo = cols.shape[:4]
    flat = cols.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        grad = np.zeros_like(x.data)
        di, dj = np.divmod(arg, kernel)
        bi, ci, hi, wi = np.indices(arg.shape)
        np.add.at(grad, (bi, ci, hi * stride + di, wi * stride + dj), g)
        return (grad,)

    return Tensor.from_op(out, (x,), _backward, name="maxpool")


def batch_norm_inference(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
                         running_var: Tensor, eps: float = 1e-5) -> Tensor:
    """Frozen-statistics batchnorm over axis 1; statistics receive no gradient."""
    if x.shape[1] != gamma.shape[0]:
        raise DimensionError(
            f"batchnorm: input channels (axis 1) = {x.shape[1]} but parameters have {gamma.shape[0]}"
        )
    count_op("batchnorm")
    view = (1, -1) + (1,) * (x.ndim - 2)
    inv_std = (1.0 / np.sqrt(running_var.data + eps)).astype(x.data.dtype)
    x_hat = (x.data - running_mean.data.reshape(view)) * inv_std.reshape(view)
    out = gamma.data.reshape(view) * x_hat + beta.data.reshape(view)
    axes = (0,) + tuple(range(2, x.ndim))

    def _backward(g):
        return (
            g * (gamma.data * inv_std).reshape(view),
            (g * x_hat).sum(axis=axes),
            g.sum(axis=axes),
            None,
            None,
        )

    return Tensor.from_op(out, (x, gamma, beta, running_mean, running_var), _backward, name="batchnorm")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    count_op("softmax")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (x,), _backward, name="softmax")


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of N x K logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    count_op("cross_entropy")
    n = logits.shape[0]
    logp = log_softmax_array(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def _backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), _backward, name="cross_entropy")


def mse(prediction: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=prediction.data.dtype)
    if target.shape != prediction.shape:
        raise DimensionError(f"mse: prediction {prediction.shape} vs target {target.shape}")
    count_op("mse")
    diff = prediction.data - target
    n = diff.size
    return Tensor.from_op(
        np.asarray((diff * diff).mean(), dtype=prediction.data.dtype), (prediction,),
        lambda g: (diff * (2.0 * g / n),),
        name="mse",
    )
