from typing import Dict, List, Optional

from pydantic import BaseModel, Field, model_validator

from dqss.schemas.quant_schema import HexFloat, QatStrategyKind, TensorClass

QAT_STATE_VERSION = 1


class QuantizerState(BaseModel):
    kind: QatStrategyKind
    tensor_class: TensorClass
    bits: int = Field(..., ge=2, le=8)
    signed: bool
    # EMA of per-batch max |x| from the warm-up
    observed: Optional[HexFloat] = None
    # PACT clip or LSQ step; absent for DoReFa
    scalar: Optional[HexFloat] = None


class LayerQatState(BaseModel):
    alpha: List[HexFloat]
    beta: List[HexFloat]
    act: List[QuantizerState]
    weight: List[QuantizerState]

    @model_validator(mode="after")
    def check_branch_counts(self) -> "LayerQatState":
        n = len(self.alpha)
        if len(self.beta) != n or len(self.act) != n or len(self.weight) != n:
            raise ValueError("alpha, beta and both quantizer lists must have one entry per pool strategy")
        return self


class ThetaSnapshot(BaseModel):
    act: List[float]
    weight: List[float]


class QatCheckpoint(BaseModel):
    """Training state stored next to the model manifest of a QAT checkpoint."""

    format_version: int = QAT_STATE_VERSION
    epoch: int = Field(..., ge=0)
    pool: List[QatStrategyKind]
    bits: int = Field(..., ge=2, le=8)
    quantize: bool = True
    initial_loss: Optional[HexFloat] = None
    steps: int = 0
    forwards: int = 0
    backwards: int = 0
    layers: Dict[str, LayerQatState] = Field(default_factory=dict)
    # theta after every finished epoch starting at history_start, and the mean loss of every training epoch
    history_start: int = Field(0, ge=0)
    history: List[Dict[str, ThetaSnapshot]] = Field(default_factory=list)
    losses: List[float] = Field(default_factory=list)
