from enum import Enum
from typing import Any, Dict, List, Union

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, PlainSerializer, model_validator
from typing_extensions import Annotated


def parse_bits(value: Any) -> Any:
    if isinstance(value, str):
        if not value.startswith("0x") or len(value) != 10:
            raise ValueError(f"expected a 0x-prefixed binary32 bit pattern, got {value!r}")
        return float(np.array(int(value, 16), dtype="<u4").view("<f4"))
    return value


def float_to_bits(value: float) -> str:
    return "0x%08x" % int(np.array(value, dtype="<f4").view("<u4"))


# float32 value stored in files as its raw bit pattern
HexFloat = Annotated[float, BeforeValidator(parse_bits), PlainSerializer(float_to_bits, return_type=str, when_used="json")]


class CalibratorKind(str, Enum):
    """PTQ strategies; declaration order is the pool index order."""

    MAXABS = "maxabs"
    KL = "kl"
    EQ = "eq"
    ADMM = "admm"


class QatStrategyKind(str, Enum):
    DOREFA = "dorefa"
    PACT = "pact"
    LSQ = "lsq"


class TensorClass(str, Enum):
    ACT = "act"
    WEIGHT = "weight"


DEFAULT_POOL: List[CalibratorKind] = list(CalibratorKind)
DEFAULT_QAT_POOL: List[QatStrategyKind] = list(QatStrategyKind)


def qmax_for(bits: int) -> int:
    return 2 ** (bits - 1) - 1


class QuantParams(BaseModel):
    """Per-tensor symmetric quantizer: threshold, scale, zero point, integer range."""

    model_config = ConfigDict(frozen=True)

    threshold: HexFloat = Field(..., gt=0)
    scale: HexFloat = Field(..., gt=0)
    zero_point: int = 0
    qmin: int
    qmax: int
    bits: int = Field(..., ge=2, le=8)
    degenerate: bool = False

    @model_validator(mode="after")
    def check_symmetric_range(self) -> "QuantParams":
        if self.zero_point != 0 or self.qmin != -self.qmax:
            raise ValueError("symmetric quantization requires zero_point = 0 and qmin = -qmax")
        if self.qmax != qmax_for(self.bits):
            raise ValueError(f"qmax must be 2^(bits-1)-1 = {qmax_for(self.bits)} for {self.bits} bits")
        expected = np.float32(self.threshold) / np.float32(self.qmax)
        if np.float32(self.scale) != expected:
            raise ValueError("scale must equal threshold / qmax in float32")
        return self

    @classmethod
    def from_threshold(cls, threshold: float, bits: int) -> "QuantParams":
        """Build params for clipping magnitude `threshold`; t = 0 becomes t = 1 (degenerate)."""
        degenerate = not threshold > 0
        t = np.float32(1.0) if degenerate else np.float32(threshold)
        n_max = qmax_for(bits)
        return cls(
            threshold=float(t),
            scale=float(t / np.float32(n_max)),
            zero_point=0,
            qmin=-n_max,
            qmax=n_max,
            bits=bits,
            degenerate=degenerate,
        )

    @classmethod
    def from_scale(cls, scale: float, bits: int) -> "QuantParams":
        return cls.from_threshold(float(np.float32(scale) * np.float32(qmax_for(bits))), bits)


class LayerQParams(BaseModel):
    act: Dict[CalibratorKind, QuantParams] = Field(default_factory=dict)
    weight: Dict[CalibratorKind, QuantParams] = Field(default_factory=dict)

    def for_class(self, tensor_class: TensorClass) -> Dict[CalibratorKind, QuantParams]:
        return self.act if tensor_class == TensorClass.ACT else self.weight


class QParamTable(BaseModel):
    """layer -> tensor class -> strategy -> QuantParams."""

    bits: int = Field(8, ge=2, le=8)
    layers: Dict[str, LayerQParams] = Field(default_factory=dict)

    def get(self, layer: str, tensor_class: TensorClass, kind: CalibratorKind) -> QuantParams:
        return self.layers[layer].for_class(tensor_class)[kind]


# PTQ assignments name calibrators; QAT assignments name QAT strategies
Strategy = Union[CalibratorKind, QatStrategyKind]


class LayerAssignment(BaseModel):
    act: Strategy
    weight: Strategy


class Assignment(BaseModel):
    layers: Dict[str, LayerAssignment] = Field(default_factory=dict)

    @classmethod
    def uniform(cls, layers: List[str], kind: Strategy) -> "Assignment":
        return cls(layers={name: LayerAssignment(act=kind, weight=kind) for name in layers})
