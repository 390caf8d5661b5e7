"""Analysis and oracle report schemas."""

from typing import Dict, Optional

from pydantic import BaseModel, Field


class ChainLink(BaseModel):
    lower: str
    upper: str
    ok: bool


class SandwichReport(BaseModel):
    """Solver energies on one compression instance and the ordering checks."""
    heads: int
    seq_len: int
    values: Dict[str, float] = Field(default_factory=dict)
    links: list[ChainLink] = Field(default_factory=list)
    passed: bool


class AlphaHistogram(BaseModel):
    edges: list[float]
    counts: list[int]


class LayerAnalysis(BaseModel):
    layer: int
    similarity: list[list[float]]
    mean_off_diagonal: Optional[float] = None
    alpha_histogram: AlphaHistogram
    alpha_count: int


class AnalysisReport(BaseModel):
    """Head redundancy statistics of an attention dump."""
    layers: list[LayerAnalysis]
    heads: int
    samples: int
    seq_len: int


class VariantResult(BaseModel):
    variant: str
    seed: int
    val_loss: float
    step_time_ms: float
    trainable_params: int


class VariantSummary(BaseModel):
    variant: str
    runs: int
    mean_val_loss: float
    std_val_loss: float
    mean_step_time_ms: float
    trainable_params: int
