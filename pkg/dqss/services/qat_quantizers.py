"""
Trainable quantizers of the QAT strategy pool.

dorefa  weights: u = tanh(w) / max|tanh(w)| rounded to n levels per sign,
        rescaled by max|w|; activations clipped to [0, 1] ([-1, 1] once the
        warm-up has seen negative inputs) and rounded with step 1/n.
pact    learnable clip a: y = round(clip(x, lo, a) / (a / n)) * (a / n) with
        lo = 0, or lo = -a when signed; dy/da = 1 above the clip, -1 below -a.
lsq     learnable step s: y = clip(round(x / s), -Qn, Qp) * s; the step
        gradient is scaled by 1 / sqrt(count * Qp).

Unsigned grids have n = 2^b - 1 levels, signed grids n = 2^(b-1) - 1 per sign.
Rounding is treated as identity in every backward (STE).
"""
import logging
from typing import Dict, List, Optional, Type

import numpy as np

from dqss.schemas.qat_schema import QuantizerState
from dqss.schemas.quant_schema import QatStrategyKind, TensorClass, qmax_for
from dqss.tensor.tensor import Tensor, count_op

logger = logging.getLogger(__name__)

MIN_SCALAR = 1e-6


class QatQuantizer:
    """Per-tensor quantizer of one branch; subclasses define the rounding grid."""

    kind: QatStrategyKind

    def __init__(self, tensor_class: TensorClass, bits: int, name: str = ""):
        self.tensor_class = tensor_class
        self.bits = bits
        self.name = name
        # weights are always quantized on a symmetric grid
        self.signed = tensor_class == TensorClass.WEIGHT
        self.observed: Optional[float] = None

    @property
    def levels(self) -> int:
        return qmax_for(self.bits) if self.signed else 2 ** self.bits - 1

    def observe(self, x: np.ndarray, momentum: float) -> None:
        """Fold one batch into the EMA of max |x| and re-initialize from it."""
        peak = np.float32(np.max(np.abs(x))) if x.size else np.float32(0.0)
        if self.observed is None:
            self.observed = float(peak)
        else:
            self.observed = float(np.float32(momentum) * np.float32(self.observed) + np.float32(1 - momentum) * peak)
        if self.tensor_class == TensorClass.ACT and x.size and float(x.min()) < 0:
            self.signed = True
        self.initialize(self.observed)

    def initialize(self, magnitude: float) -> None:
        pass

    def parameters(self) -> List[Tensor]:
        return []

    def project(self) -> None:
        for p in self.parameters():
            value = float(p.data.reshape(-1)[0])
            if not value >= MIN_SCALAR:
                logger.warning(f"{self.name or self.kind.value}: learnable scalar {value:g} projected to {MIN_SCALAR:g}")
                p.data[...] = MIN_SCALAR

    def quantize_array(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def input_grad(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def param_grads(self, x: np.ndarray, g: np.ndarray) -> List[np.ndarray]:
        return []

    def scalar(self) -> Optional[float]:
        params = self.parameters()
        return float(params[0].data.reshape(-1)[0]) if params else None

    def state(self) -> QuantizerState:
        return QuantizerState(kind=self.kind, tensor_class=self.tensor_class, bits=self.bits,
                              signed=self.signed, observed=self.observed, scalar=self.scalar())

    def load_state(self, state: QuantizerState) -> None:
        self.signed = state.signed
        self.observed = state.observed
        params = self.parameters()
        if params and state.scalar is not None:
            params[0].data[...] = state.scalar

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.tensor_class.value}, bits={self.bits}, signed={self.signed})"


class DoReFaQuantizer(QatQuantizer):
    kind = QatStrategyKind.DOREFA

    def quantize_array(self, x: np.ndarray) -> np.ndarray:
        n = self.levels
        if self.tensor_class == TensorClass.WEIGHT:
            t = np.tanh(x)
            m = np.abs(t).max() if t.size else 0
            if m == 0:
                return np.zeros_like(x)
            return (np.rint(t / m * n) / n * np.abs(x).max()).astype(x.dtype)
        lo = -1.0 if self.signed else 0.0
        return (np.rint(np.clip(x, lo, 1.0) * n) / n).astype(x.dtype)

    def input_grad(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.tensor_class == TensorClass.WEIGHT:
            t = np.tanh(x)
            m = np.abs(t).max() if t.size else 0
            if m == 0:
                return g.copy()
            # max |tanh(w)| and max |w| are held constant
            return (g * (1 - t * t) / m * np.abs(x).max()).astype(g.dtype)
        lo = -1.0 if self.signed else 0.0
        return np.where((x >= lo) & (x <= 1.0), g, 0).astype(g.dtype)


class PactQuantizer(QatQuantizer):
    kind = QatStrategyKind.PACT

    def __init__(self, tensor_class: TensorClass, bits: int, name: str = ""):
        super().__init__(tensor_class, bits, name)
        self.clip = Tensor(np.ones(1), requires_grad=True, name=f"{name}.clip")

    def initialize(self, magnitude: float) -> None:
        if magnitude > 0:
            self.clip.data[...] = magnitude

    def parameters(self) -> List[Tensor]:
        return [self.clip]

    def quantize_array(self, x: np.ndarray) -> np.ndarray:
        a = x.dtype.type(self.clip.data[0])
        step = a / x.dtype.type(self.levels)
        lo = -a if self.signed else x.dtype.type(0)
        return (np.rint(np.clip(x, lo, a) / step) * step).astype(x.dtype)

    def input_grad(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        a = self.clip.data[0]
        inside = (x < a) & ((x > -a) if self.signed else (x >= 0))
        return np.where(inside, g, 0).astype(g.dtype)

    def param_grads(self, x: np.ndarray, g: np.ndarray) -> List[np.ndarray]:
        a = self.clip.data[0]
        slope = np.where(x >= a, 1.0, 0.0)
        if self.signed:
            slope = slope - np.where(x <= -a, 1.0, 0.0)
        return [np.array([np.sum(g * slope)], dtype=self.clip.data.dtype)]


class LsqQuantizer(QatQuantizer):
    kind = QatStrategyKind.LSQ

    def __init__(self, tensor_class: TensorClass, bits: int, name: str = ""):
        super().__init__(tensor_class, bits, name)
        self.step = Tensor(np.ones(1), requires_grad=True, name=f"{name}.step")

    @property
    def q_neg(self) -> int:
        return self.levels if self.signed else 0

    def initialize(self, magnitude: float) -> None:
        if magnitude > 0:
            self.step.data[...] = magnitude / self.levels

    def parameters(self) -> List[Tensor]:
        return [self.step]

    def grad_scale(self, x: np.ndarray) -> float:
        # weights: every element; activations: features of one sample
        count = x.size if self.tensor_class == TensorClass.WEIGHT or x.ndim < 2 else x[0].size
        return 1.0 / np.sqrt(max(count, 1) * self.levels)

    def quantize_array(self, x: np.ndarray) -> np.ndarray:
        s = x.dtype.type(self.step.data[0])
        return (np.clip(np.rint(x / s), -self.q_neg, self.levels) * s).astype(x.dtype)

    def input_grad(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        v = x / x.dtype.type(self.step.data[0])
        return np.where((v >= -self.q_neg) & (v <= self.levels), g, 0).astype(g.dtype)

    def param_grads(self, x: np.ndarray, g: np.ndarray) -> List[np.ndarray]:
        v = x / x.dtype.type(self.step.data[0])
        slope = np.where(v < -self.q_neg, -self.q_neg, np.where(v > self.levels, self.levels, np.rint(v) - v))
        return [np.array([np.sum(g * slope) * self.grad_scale(x)], dtype=self.step.data.dtype)]


QUANTIZERS: Dict[QatStrategyKind, Type[QatQuantizer]] = {
    QatStrategyKind.DOREFA: DoReFaQuantizer,
    QatStrategyKind.PACT: PactQuantizer,
    QatStrategyKind.LSQ: LsqQuantizer,
}


def make_quantizer(kind: QatStrategyKind, tensor_class: TensorClass, bits: int, name: str = "") -> QatQuantizer:
    return QUANTIZERS[QatStrategyKind(kind)](tensor_class, bits, name)


def qat_quantize(T: Tensor, quantizer: QatQuantizer) -> Tensor:
    """Fake-quantize T with a QAT strategy; STE to T plus the strategy's scalar gradient."""
    count_op("qat_quantize")
    quantizer.project()
    x = T.data
    params = quantizer.parameters()
    return Tensor.from_op(
        quantizer.quantize_array(x), (T, *params),
        lambda g: (quantizer.input_grad(x, g), *quantizer.param_grads(x, g)),
        name=f"qat_{quantizer.kind.value}",
    )
