"""
Uniform symmetric per-tensor fake quantization.

quantize:    T_q = clamp(round_half_even(T / s) + z, N_min, N_max)
dequantize:  T^  = s * (T_q - z)
fake_quant:  dequantize(quantize(T))

The recorded backward of `fake_quant` is the clipped straight-through
estimator: the upstream gradient passes where |T| <= t and is zeroed outside.
"""
import threading
from contextlib import contextmanager
from typing import Iterator, Union

import numpy as np

from dqss.core.errors import DimensionError, NonFiniteInputError, QuantRangeError
from dqss.schemas.quant_schema import QuantParams
from dqss.tensor.tensor import Tensor, count_op

ArrayLike = Union[Tensor, np.ndarray]

_mode = threading.local()


@contextmanager
def surrogate_rounding() -> Iterator[None]:
    """Replace rounding by identity so fake_quant becomes the clamp the STE differentiates."""
    previous = getattr(_mode, "surrogate", False)
    _mode.surrogate = True
    try:
        yield
    finally:
        _mode.surrogate = previous


def _values(T: ArrayLike) -> np.ndarray:
    return T.data if isinstance(T, Tensor) else np.asarray(T)


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        index = tuple(int(i) for i in np.argwhere(~np.isfinite(x))[0])
        raise NonFiniteInputError(f"non-finite input element at index {index}", {"index": index})


def quantize(T: ArrayLike, p: QuantParams) -> np.ndarray:
    x = _values(T)
    _check_finite(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.dtype(np.float32)
    q = np.rint(x.astype(dtype, copy=False) / dtype.type(p.scale)) + p.zero_point
    return np.clip(q, p.qmin, p.qmax).astype(np.int32)


def dequantize(T_q: np.ndarray, p: QuantParams, dtype=np.float32) -> np.ndarray:
    T_q = np.asarray(T_q)
    if T_q.size and (T_q.min() < p.qmin or T_q.max() > p.qmax):
        raise QuantRangeError(f"quantized entries must lie in [{p.qmin}, {p.qmax}]")
    dtype = np.dtype(dtype)
    return (dtype.type(p.scale) * (T_q - p.zero_point).astype(dtype)).astype(dtype)


def fake_quant_array(x: np.ndarray, p: QuantParams) -> np.ndarray:
    dtype = x.dtype
    if getattr(_mode, "surrogate", False):
        s = dtype.type(p.scale)
        return np.clip(x, p.qmin * s, p.qmax * s)
    return dequantize(quantize(x, p), p, dtype)


def clip_mask(x: np.ndarray, p: QuantParams) -> np.ndarray:
    return np.abs(x) <= x.dtype.type(p.threshold)


def ste_backward(upstream_grad: ArrayLike, T: ArrayLike, p: QuantParams) -> np.ndarray:
    g = _values(upstream_grad)
    x = _values(T)
    if g.shape != x.shape:
        raise DimensionError(f"ste_backward: gradient shape {g.shape} vs input shape {x.shape}")
    return np.where(clip_mask(x, p), g, 0).astype(g.dtype)


def fake_quant(T: Tensor, p: QuantParams) -> Tensor:
    count_op("fake_quant")
    x = T.data
    return Tensor.from_op(
        fake_quant_array(x, p), (T,),
        lambda g: (ste_backward(g, x, p),),
        name="fake_quant",
    )
