"""Shared Pydantic schemas for data validation."""

from .config import DistillConfig, DistillRunConfig, MergeStrategy, TaskConfig, TeacherRunConfig, TinyTransformerConfig
from .dump import DumpManifest, ParamsManifest
from .metrics import AlphaRecord, RunMetrics, StepRecord, ValidationRecord
from .reports import AnalysisReport, SandwichReport

__all__ = [
    "TinyTransformerConfig",
    "TaskConfig",
    "TeacherRunConfig",
    "DistillConfig",
    "DistillRunConfig",
    "MergeStrategy",
    "DumpManifest",
    "ParamsManifest",
    "StepRecord",
    "ValidationRecord",
    "AlphaRecord",
    "RunMetrics",
    "AnalysisReport",
    "SandwichReport",
]
