"""Training metric records."""

from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel, Field


class StepRecord(BaseModel):
    step: int
    task_loss: float
    shd_loss: float = 0.0
    aux_loss: float = 0.0
    total_loss: float


class ValidationRecord(BaseModel):
    step: int
    val_loss: float


class AlphaRecord(BaseModel):
    """One fold coefficient. ``layer`` is the 1-indexed teacher layer squeezed."""
    step: int
    layer: int
    group: int
    sample: int
    alpha: float


class RunMetrics(BaseModel):
    """Everything a training run reports."""
    steps: list[StepRecord] = Field(default_factory=list)
    validations: list[ValidationRecord] = Field(default_factory=list)
    alphas: list[AlphaRecord] = Field(default_factory=list)

    def val_loss_at(self, step: int) -> Optional[float]:
        for v in self.validations:
            if v.step == step:
                return v.val_loss
        return None

    @property
    def final_val_loss(self) -> Optional[float]:
        return self.validations[-1].val_loss if self.validations else None

    def alpha_histograms(self, bins: int = 20) -> Dict[int, list[int]]:
        """Per-layer counts of recorded alphas over [0, 1]."""
        by_layer: Dict[int, list[float]] = {}
        for rec in self.alphas:
            by_layer.setdefault(rec.layer, []).append(rec.alpha)
        return {
            layer: np.histogram(values, bins=bins, range=(0.0, 1.0))[0].tolist()
            for layer, values in sorted(by_layer.items())
        }
