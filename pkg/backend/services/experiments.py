"""Ablation comparisons, temperature/beta sweeps and training-cost summaries."""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from shared.schemas.config import Baseline, DistillConfig, DistillRunConfig, MergeStrategy, TeacherRunConfig
from shared.schemas.reports import VariantResult, VariantSummary
from shared.utils.errors import ConfigError

from .datasets import make_task_data
from .model import TinyTransformer
from .trainer import distill_student, train_teacher

logger = logging.getLogger(__name__)

DEFAULT_VARIANTS = ("no-kd", "kd", "kd+shd")
DEFAULT_SWEEP = ((1.0, 0.5), (1.0, 2.0), (1.0, 5.0), (2.0, 2.0))


def variant_config(name: str, base: DistillConfig) -> DistillConfig:
    """Distillation settings of a named ablation row, derived from ``base``."""
    kd = base.logit_kd_weight if base.logit_kd_weight > 0 else 1.0
    beta = base.beta if base.beta > 0 else 2.0
    no_shd = {"beta": 0.0, "baseline": None}
    variants: Dict[str, dict] = {
        "no-kd": {"beta": 0.0, "logit_kd_weight": 0.0, "baseline": None},
        "kd": {**no_shd, "logit_kd_weight": kd},
        "kd+shd": {"beta": beta, "logit_kd_weight": kd, "strategy": MergeStrategy.SHD, "baseline": None},
        "shd-only": {"beta": beta, "logit_kd_weight": 0.0, "strategy": MergeStrategy.SHD, "baseline": None},
        "kd+constant": {"beta": beta, "logit_kd_weight": kd, "strategy": MergeStrategy.CONSTANT_HALF, "baseline": None},
        "kd+hard-select": {"beta": beta, "logit_kd_weight": kd, "strategy": MergeStrategy.HARD_SELECT, "baseline": None},
        "kd+head-match": {"beta": beta, "logit_kd_weight": kd, "strategy": MergeStrategy.HEAD_MATCH, "baseline": None},
        "kd+fd-projector": {**no_shd, "logit_kd_weight": kd, "baseline": Baseline.PROJECTOR},
        "kd+fd-self-corr": {**no_shd, "logit_kd_weight": kd, "baseline": Baseline.SELF_CORR},
    }
    if name not in variants:
        raise ConfigError(f"Unknown variant {name!r}; choose from {sorted(variants)}")
    return base.model_copy(update=variants[name])


def summarize(results: Sequence[VariantResult]) -> List[VariantSummary]:
    """Mean and population std of validation loss per variant, in first-seen order."""
    order: List[str] = []
    grouped: Dict[str, List[VariantResult]] = {}
    for r in results:
        if r.variant not in grouped:
            order.append(r.variant)
        grouped.setdefault(r.variant, []).append(r)
    summaries = []
    for name in order:
        runs = grouped[name]
        losses = np.array([r.val_loss for r in runs])
        summaries.append(VariantSummary(
            variant=name,
            runs=len(runs),
            mean_val_loss=float(losses.mean()),
            std_val_loss=float(losses.std()),
            mean_step_time_ms=float(np.mean([r.step_time_ms for r in runs])),
            trainable_params=runs[0].trainable_params,
        ))
    return summaries


def cost_report(results: Sequence[VariantResult]) -> List[dict]:
    """Per-variant wall time per step and trainable parameter count."""
    return [
        {"variant": s.variant, "mean_step_time_ms": s.mean_step_time_ms, "trainable_params": s.trainable_params}
        for s in summarize(results)
    ]


def _teacher_and_data(teacher_cfg: TeacherRunConfig, teacher: Optional[TinyTransformer]):
    train, val = make_task_data(teacher_cfg.task, teacher_cfg.model.vocab)
    if teacher is None:
        teacher = train_teacher(teacher_cfg, train, val).model
    return teacher, train, val


def compare_variants(
    teacher_cfg: TeacherRunConfig,
    distill_base: DistillRunConfig,
    variants: Sequence[str] = DEFAULT_VARIANTS,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    steps: Optional[int] = None,
    teacher: Optional[TinyTransformer] = None,
) -> Tuple[List[VariantResult], List[VariantSummary]]:
    """Distill one teacher with every variant and seed; the teacher is trained once."""
    teacher, train, val = _teacher_and_data(teacher_cfg, teacher)
    results = []
    for name in variants:
        dcfg = variant_config(name, distill_base.distill)
        for seed in seeds:
            update = {"distill": dcfg, "seed": seed, "task": teacher_cfg.task}
            if steps is not None:
                update["steps"] = steps
            run = distill_base.model_copy(update=update)
            result = distill_student(teacher, run, train, val)
            results.append(VariantResult(
                variant=name,
                seed=seed,
                val_loss=result.metrics.final_val_loss if result.metrics.final_val_loss is not None else float("nan"),
                step_time_ms=result.step_time_ms,
                trainable_params=result.trainable_params,
            ))
            logger.info(f"Variant {name}, seed {seed}: val loss {results[-1].val_loss:.4f}")
    return results, summarize(results)


def sweep_hyperparameters(
    teacher_cfg: TeacherRunConfig,
    distill_base: DistillRunConfig,
    grid: Sequence[Tuple[float, float]] = DEFAULT_SWEEP,
    seeds: Sequence[int] = (0,),
    steps: Optional[int] = None,
    teacher: Optional[TinyTransformer] = None,
) -> List[dict]:
    """Validation loss of the SHD run for each (attention temperature, beta) setting."""
    teacher, train, val = _teacher_and_data(teacher_cfg, teacher)
    rows = []
    for t_a, beta in grid:
        dcfg = distill_base.distill.model_copy(update={"attn_temperature": t_a, "beta": beta})
        losses = []
        for seed in seeds:
            update = {"distill": dcfg, "seed": seed, "task": teacher_cfg.task}
            if steps is not None:
                update["steps"] = steps
            result = distill_student(teacher, distill_base.model_copy(update=update), train, val)
            losses.append(result.metrics.final_val_loss)
        rows.append({
            "attn_temperature": t_a,
            "beta": beta,
            "runs": len(losses),
            "mean_val_loss": float(np.mean(losses)),
            "std_val_loss": float(np.std(losses)),
        })
        logger.info(f"T_a={t_a}, beta={beta}: mean val loss {rows[-1]['mean_val_loss']:.4f}")
    return rows


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Fixed-width text table for terminal output."""
    cells = [[_cell(r[c]) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)
    return "\n".join(lines)


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)

