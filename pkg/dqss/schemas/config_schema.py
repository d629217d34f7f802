from typing import List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from dqss.schemas.quant_schema import DEFAULT_POOL, DEFAULT_QAT_POOL, CalibratorKind, QatStrategyKind

LossKind = Literal["ce", "mse"]


class SearchConfig(BaseModel):
    """PTQ search protocol: SGD on importance parameters, lr decayed x0.1 at milestones."""

    lr: float = Field(1e-4, ge=0)
    epochs: int = Field(3, ge=0)
    # 1-based epochs at whose beginning the lr is divided by lr_decay
    lr_milestones: List[int] = Field(default_factory=lambda: [2, 3])
    lr_decay: float = Field(10.0, gt=0)
    batch_size: Optional[int] = Field(None, ge=1)
    loss: LossKind = "ce"
    seed: int = 42

    def lr_at(self, epoch: int) -> float:
        """Learning rate in effect during 1-based `epoch`."""
        decays = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr / (self.lr_decay ** decays)


class QatConfig(BaseModel):
    pool: List[QatStrategyKind] = Field(default_factory=lambda: list(DEFAULT_QAT_POOL))
    bits: int = Field(4, ge=2, le=8)
    # total epochs, the first one being the observation warm-up
    epochs: int = Field(200, ge=1)
    warmup_epochs: int = Field(1, ge=0)
    weight_lr: float = Field(1e-3, ge=0)
    theta_lr: float = Field(1e-4, ge=0)
    lr_milestones: List[int] = Field(default_factory=lambda: [101, 201])
    lr_decay: float = Field(10.0, gt=0)
    batch_size: int = Field(32, ge=1)
    ema_momentum: float = Field(0.9, ge=0, lt=1)
    divergence_factor: float = Field(1e3, gt=1)
    quantize: bool = True
    seed: int = 42

    @field_validator("pool")
    @classmethod
    def check_pool(cls, pool: List[QatStrategyKind]) -> List[QatStrategyKind]:
        if not pool or len(set(pool)) != len(pool):
            raise ValueError("QAT pool must be non-empty and deduplicated")
        return pool

    def lr_scale_at(self, epoch: int) -> float:
        decays = sum(1 for m in self.lr_milestones if epoch >= m)
        return 1.0 / (self.lr_decay ** decays)


class PipelineConfig(BaseModel):
    model: Optional[str] = None
    data: Optional[str] = None
    eval_data: Optional[str] = None
    pool: List[CalibratorKind] = Field(default_factory=lambda: list(DEFAULT_POOL))
    bits: int = Field(8, ge=2, le=8)
    seed: int = 42
    calib_limit: int = Field(256, ge=0)
    threads: int = Field(1, ge=1)
    kl_bins: int = Field(2048, ge=1)
    eq_grid: int = Field(100, ge=1)
    admm_iters: int = Field(50, ge=0)
    admm_tol: float = Field(1e-6, ge=0)
    search: SearchConfig = Field(default_factory=SearchConfig)
    qat: QatConfig = Field(default_factory=QatConfig)
    uniform_theta: bool = False
    qparams: Optional[str] = None
    assignment: Optional[str] = None
    out: str = "out"

    @field_validator("pool")
    @classmethod
    def check_pool(cls, pool: List[CalibratorKind]) -> List[CalibratorKind]:
        if not pool:
            raise ValueError("pool must not be empty")
        if len(set(pool)) != len(pool):
            raise ValueError("pool must not repeat a strategy")
        return sorted(pool, key=list(CalibratorKind).index)

    @model_validator(mode="after")
    def propagate_seed(self) -> "PipelineConfig":
        self.search.seed = self.seed
        self.qat.seed = self.seed
        return self
