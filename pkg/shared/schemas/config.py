"""Run configuration schemas.

Every model rejects unknown keys so a misspelled hyperparameter fails loudly
instead of silently falling back to a default.
"""

import logging
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TaskKind(str, Enum):
    COPY = "copy"
    SORT = "sort"
    CHAR_LM = "char_lm"


class AttnLossKind(str, Enum):
    KL = "kl"
    MSE = "mse"


class Baseline(str, Enum):
    SELF_CORR = "self_corr"
    PROJECTOR = "projector"


class MergeStrategy(str, Enum):
    """How teacher heads of one group become a single supervision map."""
    SHD = "shd"
    CONSTANT_HALF = "constant"
    HARD_SELECT = "hard-select"
    HEAD_MATCH = "head-match"


class TinyTransformerConfig(StrictModel):
    """Shape of a teacher or student model."""
    vocab: int = Field(ge=2)
    d_model: int = Field(ge=1)
    h: int = Field(ge=1)
    d: int = Field(ge=1)
    layers: int = Field(ge=1)
    max_seq: int = Field(ge=1)
    causal: bool = True
    tie_embeddings: bool = False

    @model_validator(mode="after")
    def check_head_width(self):
        if self.d_model != self.h * self.d:
            raise ValueError(f"d_model ({self.d_model}) must equal h * d ({self.h} * {self.d})")
        return self


class TaskConfig(StrictModel):
    """Synthetic task the models are trained on."""
    kind: TaskKind = TaskKind.COPY
    size: int = Field(default=2048, ge=1)
    val_size: int = Field(default=256, ge=1)
    seq_len: int = Field(default=16, ge=2)
    seed: int = 0
    text_path: Optional[str] = None


class TeacherRunConfig(StrictModel):
    model: TinyTransformerConfig
    task: TaskConfig = Field(default_factory=TaskConfig)
    steps: int = Field(default=2000, ge=0)
    lr: float = Field(default=3e-3, gt=0)
    batch_size: int = Field(default=32, ge=1)
    seed: int = 0
    val_every: int = Field(default=100, ge=1)
    log_every: int = Field(default=100, ge=1)

    @model_validator(mode="after")
    def check_seq_len(self):
        if self.task.seq_len > self.model.max_seq:
            raise ValueError(f"task seq_len {self.task.seq_len} exceeds model max_seq {self.model.max_seq}")
        return self


class DistillConfig(StrictModel):
    """Distillation hyperparameters. Defaults follow the image-generation setting."""
    beta: float = Field(default=2.0, ge=0)
    attn_temperature: float = Field(default=2.0, gt=0)
    logit_temperature: float = Field(default=2.0, gt=0)
    # 0 disables logit KD.
    logit_kd_weight: float = Field(default=1.0, ge=0)
    strategy: MergeStrategy = MergeStrategy.SHD
    attn_loss_kind: AttnLossKind = AttnLossKind.KL
    baseline: Optional[Baseline] = None
    baseline_weight: float = Field(default=1.0, ge=0)
    hard_select_seed: int = 0
    calibration_size: int = Field(default=32, ge=1)
    alpha_every: int = Field(default=50, ge=1)

    @field_validator("attn_temperature")
    @classmethod
    def warn_low_temperature(cls, v):
        if v < 1.0:
            logger.warning(f"Attention temperature {v} is below 1; supervision maps will be sharpened")
        return v


class DistillRunConfig(StrictModel):
    student: TinyTransformerConfig
    distill: DistillConfig = Field(default_factory=DistillConfig)
    # Defaults to the task recorded with the teacher.
    task: Optional[TaskConfig] = None
    steps: int = Field(default=2000, ge=0)
    lr: float = Field(default=3e-3, gt=0)
    batch_size: int = Field(default=32, ge=1)
    seed: int = 0
    val_every: int = Field(default=100, ge=1)
    log_every: int = Field(default=100, ge=1)
