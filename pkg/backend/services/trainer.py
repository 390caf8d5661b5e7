"""Teacher training, student distillation and the checks around them."""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from shared.schemas.config import (
    Baseline,
    DistillConfig,
    DistillRunConfig,
    TaskConfig,
    TeacherRunConfig,
    TinyTransformerConfig,
)
from shared.schemas.dump import DumpManifest
from shared.schemas.metrics import AlphaRecord, RunMetrics, StepRecord, ValidationRecord
from shared.utils import storage
from shared.utils.errors import ConfigError, DomainError, NumericError
from shared.utils.numkernel import DTYPE, make_rng, random_matrix

from .datasets import IGNORE_INDEX, TokenDataset, make_dataset, make_task_data
from .distill import (
    LayerMap,
    ObjectiveTerms,
    baseline_loss,
    layer_map,
    logit_kd_loss,
    shd_loss,
    teacher_targets,
)
from .model import ModelOutput, TinyTransformer, build_model
from .squeeze import MergePlan, MergeResult, MergeStrategy, build_plan

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
EVAL_BATCH = 256


@dataclass
class TrainResult:
    model: TinyTransformer
    metrics: RunMetrics
    step_time_ms: float = 0.0
    trainable_params: int = 0
    projectors: Dict[int, torch.Tensor] = field(default_factory=dict)


def task_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over supervised positions."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE_INDEX)


@torch.no_grad()
def evaluate(model: TinyTransformer, dataset: TokenDataset) -> float:
    """Validation cross-entropy over every supervised position of ``dataset``."""
    total, count = 0.0, 0
    for start in range(0, len(dataset), EVAL_BATCH):
        inputs, targets = dataset.inputs[start:start + EVAL_BATCH], dataset.targets[start:start + EVAL_BATCH]
        logits = model(inputs).logits
        flat = targets.reshape(-1)
        total += float(F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), flat, ignore_index=IGNORE_INDEX, reduction="sum"
        ))
        count += int((flat != IGNORE_INDEX).sum())
    if count == 0:
        raise DomainError("validation set has no supervised positions")
    return total / count


def _train_loop(
    model: TinyTransformer,
    train: TokenDataset,
    val: TokenDataset,
    run,
    rng: np.random.Generator,
    objective: Callable[[torch.Tensor, torch.Tensor, int], ObjectiveTerms],
    extra_params: Sequence[torch.Tensor] = (),
    on_step: Optional[Callable[[int, ObjectiveTerms], None]] = None,
) -> Tuple[RunMetrics, float]:
    """Adam over ``model`` (plus ``extra_params``) with seeded batch sampling."""
    metrics = RunMetrics()
    params = list(model.parameters()) + list(extra_params)
    optimizer = torch.optim.Adam(params, lr=run.lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    started = time.perf_counter()
    for step in range(run.steps):
        idx = rng.integers(0, len(train), size=run.batch_size)
        inputs, targets = train.batch(idx)
        terms = objective(inputs, targets, step)
        total = terms.total
        value = float(total)
        if not math.isfinite(value):
            raise NumericError(
                f"Training diverged at step {step}: total loss {value} "
                f"(task {float(terms.task)}, shd {float(terms.shd)}, aux {float(terms.aux)})"
            )
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        metrics.steps.append(StepRecord(
            step=step,
            task_loss=float(terms.task),
            shd_loss=float(terms.shd),
            aux_loss=float(terms.aux),
            total_loss=value,
        ))
        if on_step is not None:
            on_step(step, terms)
        if (step + 1) % run.val_every == 0 or step == run.steps - 1:
            metrics.validations.append(ValidationRecord(step=step, val_loss=evaluate(model, val)))
        if (step + 1) % run.log_every == 0:
            logger.info(f"Step {step + 1}/{run.steps}: task {float(terms.task):.4f}, total {value:.4f}")
    elapsed = time.perf_counter() - started
    step_ms = 1000.0 * elapsed / run.steps if run.steps else 0.0
    return metrics, step_ms


def train_teacher(cfg: TeacherRunConfig, train: TokenDataset, val: TokenDataset) -> TrainResult:
    """Plain cross-entropy training, a pure function of the config."""
    logger.info(
        f"Training teacher: d_model={cfg.model.d_model}, h={cfg.model.h}, layers={cfg.model.layers}, "
        f"steps={cfg.steps}, lr={cfg.lr}, seed={cfg.seed}"
    )
    rng = make_rng(cfg.seed)
    model = build_model(cfg.model, rng)
    zero = torch.zeros((), dtype=DTYPE)

    def objective(inputs, targets, step):
        return ObjectiveTerms(task=task_loss(model(inputs).logits, targets), shd=zero, aux=zero)

    metrics, step_ms = _train_loop(model, train, val, cfg, rng, objective)
    logger.info(f"Teacher done: final val loss {metrics.final_val_loss}")
    return TrainResult(model=model, metrics=metrics, step_time_ms=step_ms, trainable_params=model.num_parameters())


class DistillObjective:
    """Task loss plus attention-map, logit and feature distillation against a frozen teacher."""

    def __init__(
        self,
        teacher: TinyTransformer,
        student: TinyTransformer,
        cfg: DistillConfig,
        lm: LayerMap,
        plans: Sequence[MergePlan],
        projectors: Optional[Dict[int, torch.Tensor]] = None,
    ):
        self.teacher = teacher
        self.student = student
        self.cfg = cfg
        self.lm = lm
        self.plans = list(plans)
        self.projectors = projectors or {}

    @property
    def needs_teacher(self) -> bool:
        c = self.cfg
        return c.beta > 0 or c.logit_kd_weight > 0 or (c.baseline is not None and c.baseline_weight > 0)

    @torch.no_grad()
    def teacher_pass(self, inputs: torch.Tensor) -> Optional[ModelOutput]:
        return self.teacher(inputs) if self.needs_teacher else None

    def __call__(
        self,
        inputs: torch.Tensor,
        targets: torch.Tensor,
        teacher_out: Optional[ModelOutput] = None,
        teacher_merges: Optional[List[MergeResult]] = None,
    ) -> ObjectiveTerms:
        """``teacher_out`` and ``teacher_merges`` reuse teacher-side work already done for this batch."""
        cfg = self.cfg
        out = self.student(inputs)
        zero = torch.zeros((), dtype=DTYPE)
        terms = ObjectiveTerms(task=task_loss(out.logits, targets), shd=zero, aux=zero)
        if not self.needs_teacher:
            return terms
        if teacher_out is None:
            teacher_out = self.teacher_pass(inputs)
        if cfg.beta > 0:
            terms.shd, terms.merges = shd_loss(
                teacher_out.bundles, out.bundles, cfg, self.lm, self.plans, targets=teacher_merges
            )
        if cfg.logit_kd_weight > 0:
            kd = logit_kd_loss(teacher_out.logits, out.logits, cfg.logit_temperature, targets != IGNORE_INDEX)
            terms.aux = terms.aux + cfg.logit_kd_weight * kd
        terms.aux = terms.aux + baseline_loss(teacher_out.features, out.features, cfg, self.lm, self.projectors)
        return terms


def check_compatible(teacher_cfg: TinyTransformerConfig, student_cfg: TinyTransformerConfig, seq_len: int):
    if teacher_cfg.vocab != student_cfg.vocab:
        raise ConfigError(f"teacher vocab {teacher_cfg.vocab} differs from student vocab {student_cfg.vocab}")
    if teacher_cfg.causal != student_cfg.causal:
        raise ConfigError("teacher and student must share the causal setting")
    if seq_len > min(teacher_cfg.max_seq, student_cfg.max_seq):
        raise ConfigError(f"seq_len {seq_len} exceeds a model's max_seq")
    if student_cfg.h > teacher_cfg.h:
        raise DomainError(f"student has more heads ({student_cfg.h}) than teacher ({teacher_cfg.h})")


def make_plans(
    teacher: TinyTransformer,
    student_cfg: TinyTransformerConfig,
    cfg: DistillConfig,
    lm: LayerMap,
    calibration: Optional[TokenDataset] = None,
) -> List[MergePlan]:
    """One merge plan per mapped layer, fixed before training."""
    strategy = cfg.strategy
    h_t = teacher.config.h
    cal_bundles = None
    if strategy == MergeStrategy.HEAD_MATCH:
        if calibration is None:
            raise DomainError("head matching needs a calibration batch")
        with torch.no_grad():
            cal_bundles = teacher(calibration.inputs).bundles
    select_rng = make_rng(cfg.hard_select_seed)
    plans = []
    for _, t_layer in lm:
        cal_maps = None
        if cal_bundles is not None:
            cal_maps = cal_bundles[t_layer - 1].tempered(cfg.attn_temperature).maps
        plans.append(build_plan(h_t, student_cfg.h, strategy, cfg.hard_select_seed, cal_maps, rng=select_rng))
    logger.info(f"Merge plans ({strategy.value}): " + "; ".join(str(list(map(list, p.groups))) for p in plans))
    return plans


def _alpha_records(step: int, lm: LayerMap, merges) -> List[AlphaRecord]:
    records = []
    for (_, t_layer), result in zip(lm, merges):
        for g, alphas in enumerate(result.alphas):
            if alphas.numel() == 0:
                continue
            values = alphas.reshape(-1, alphas.shape[-1])
            for sample, row in enumerate(values.tolist()):
                for a in row:
                    records.append(AlphaRecord(step=step, layer=t_layer, group=g, sample=sample, alpha=a))
    return records


def distill_student(
    teacher: TinyTransformer,
    run: DistillRunConfig,
    train: TokenDataset,
    val: TokenDataset,
    initial_state: Optional[dict] = None,
) -> TrainResult:
    """Train ``run.student`` against the frozen teacher.

    The student is initialised from ``PCG64(run.seed)`` exactly as
    ``train_teacher`` would initialise it; projector weights draw from the same
    stream only when the projector baseline is selected. ``initial_state``
    overrides the random weights afterwards.
    """
    cfg = run.distill
    check_compatible(teacher.config, run.student, train.seq_len)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    lm = layer_map(teacher.config.layers, run.student.layers)

    rng = make_rng(run.seed)
    student = build_model(run.student, rng)
    if initial_state is not None:
        student.load_state_dict(initial_state)
    projectors: Dict[int, torch.Tensor] = {}
    if cfg.baseline == Baseline.PROJECTOR:
        for s_layer, _ in lm:
            w = random_matrix(rng, run.student.d_model, teacher.config.d_model, run.student.d_model ** -0.5)
            projectors[s_layer] = nn.Parameter(w)

    plans = make_plans(teacher, run.student, cfg, lm, train.head(cfg.calibration_size))
    objective = DistillObjective(teacher, student, cfg, lm, plans, projectors)
    alphas: List[AlphaRecord] = []

    def step_fn(inputs, targets, step):
        return objective(inputs, targets)

    def on_step(step, terms):
        if terms.merges and step % cfg.alpha_every == 0:
            alphas.extend(_alpha_records(step, lm, terms.merges))

    logger.info(
        f"Distilling: teacher h={teacher.config.h}/L={teacher.config.layers} -> student "
        f"h={run.student.h}/L={run.student.layers}, layers {list(lm)}, beta={cfg.beta}, "
        f"T_a={cfg.attn_temperature}, kd={cfg.logit_kd_weight}, baseline={cfg.baseline}"
    )
    metrics, step_ms = _train_loop(student, train, val, run, rng, step_fn, list(projectors.values()), on_step)
    metrics.alphas = alphas
    logger.info(f"Student done: final val loss {metrics.final_val_loss}, {len(alphas)} alphas recorded")
    return TrainResult(
        model=student,
        metrics=metrics,
        step_time_ms=step_ms,
        trainable_params=student.num_parameters() + sum(p.numel() for p in projectors.values()),
        projectors=projectors,
    )


# Gradient check

GRAD_CHECK_TEACHER = TinyTransformerConfig(vocab=8, d_model=12, h=3, d=4, layers=2, max_seq=8)
GRAD_CHECK_STUDENT = TinyTransformerConfig(vocab=8, d_model=8, h=2, d=4, layers=2, max_seq=8)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    checked: int
    per_parameter: Dict[str, float] = field(default_factory=dict)


def grad_check(
    distill_cfg: Optional[DistillConfig] = None,
    seed: int = 0,
    teacher_cfg: TinyTransformerConfig = GRAD_CHECK_TEACHER,
    student_cfg: TinyTransformerConfig = GRAD_CHECK_STUDENT,
    eps: float = 1e-5,
    batch: int = 2,
) -> GradCheckReport:
    """Autograd gradients of the full objective against central differences.

    Relative error per entry is |a - n| / max(|a|, |n|, 1e-4). Teacher outputs
    are computed once; they are constants of the objective.
    """
    if student_cfg.max_seq > 8 or student_cfg.d_model > 16:
        raise DomainError("grad_check is limited to N <= 8 and d_model <= 16")
    cfg = distill_cfg or DistillConfig(baseline=Baseline.SELF_CORR)
    rng = make_rng(seed)
    teacher = build_model(teacher_cfg, rng)
    for p in teacher.parameters():
        p.requires_grad_(False)
    student = build_model(student_cfg, rng)
    lm = layer_map(teacher_cfg.layers, student_cfg.layers)
    data = make_dataset("copy", seed, batch, student_cfg.max_seq, student_cfg.vocab)
    projectors = {}
    if cfg.baseline == Baseline.PROJECTOR:
        projectors = {
            s: nn.Parameter(random_matrix(rng, student_cfg.d_model, teacher_cfg.d_model, 0.3)) for s, _ in lm
        }
    plans = make_plans(teacher, student_cfg, cfg, lm, data)
    objective = DistillObjective(teacher, student, cfg, lm, plans, projectors)
    teacher_out = objective.teacher_pass(data.inputs)
    merges = None
    if cfg.beta > 0:
        merges = teacher_targets(teacher_out.bundles, lm, plans, cfg.attn_temperature)

    def value() -> torch.Tensor:
        return objective(data.inputs, data.targets, teacher_out, merges).total

    named = list(student.named_parameters()) + [(f"projector.{s}", p) for s, p in projectors.items()]
    params = [p for _, p in named]
    grads = torch.autograd.grad(value(), params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    per_param, checked = {}, 0
    with torch.no_grad():
        for (name, p), grad in zip(named, analytic):
            flat, g = p.view(-1), grad.reshape(-1)
            worst = 0.0
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(value())
                flat[i] = orig - eps
                down = float(value())
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = float(g[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
                worst = max(worst, err)
                checked += 1
            per_param[name] = worst
    worst_name = max(per_param, key=per_param.get)
    report = GradCheckReport(per_param[worst_name], worst_name, checked, per_param)
    logger.info(f"Gradient check: max rel error {report.max_rel_error:.3e} at {worst_name} over {checked} entries")
    return report


# Persistence

def save_model(model: TinyTransformer, out_dir: Path):
    return storage.save_params(out_dir, model.config.model_dump(mode="json"), model.named_parameters())


def load_model(model_dir: Path) -> TinyTransformer:
    manifest, tensors = storage.load_params(model_dir)
    try:
        cfg = TinyTransformerConfig.model_validate(manifest.config)
    except Exception as e:
        raise ConfigError(f"Invalid model config in {model_dir}: {e}") from e
    model = TinyTransformer(cfg)
    expected = {name for name, _ in model.named_parameters()}
    if set(tensors) != expected:
        raise ConfigError(f"params.json in {model_dir} does not match the model's parameter names")
    with torch.no_grad():
        for name, p in model.named_parameters():
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise ConfigError(f"tensor {name} has shape {tuple(tensors[name].shape)}, expected {tuple(p.shape)}")
            p.copy_(tensors[name])
    return model


@torch.no_grad()
def export_dump(model: TinyTransformer, tokens: torch.Tensor, out_dir: Path) -> DumpManifest:
    """Write the model's per-layer maps and head values on ``tokens`` as a dump."""
    out = model(tokens)
    return storage.write_dump(
        out_dir,
        [b.maps for b in out.bundles],
        [b.head_values for b in out.bundles],
        causal=model.config.causal,
    )


def run_teacher(cfg: TeacherRunConfig, out_dir: Path) -> TrainResult:
    """Train a teacher and write params, metrics.csv and the resolved config."""
    out_dir = Path(out_dir)
    train, val = make_task_data(cfg.task, cfg.model.vocab)
    result = train_teacher(cfg, train, val)
    save_model(result.model, out_dir)
    storage.write_metrics_csv(out_dir / "metrics.csv", result.metrics, distill=False)
    storage.write_model_json(out_dir / "config.json", cfg)
    return result


def load_teacher(teacher_dir: Path) -> Tuple[TinyTransformer, TeacherRunConfig]:
    teacher_dir = Path(teacher_dir)
    teacher_run = storage.read_model_json(teacher_dir / "config.json", TeacherRunConfig)
    return load_model(teacher_dir), teacher_run


def run_distill(cfg: DistillRunConfig, teacher_dir: Path, out_dir: Path) -> TrainResult:
    """Distill from a teacher directory and write params, metrics.csv, alphas.csv and config.json."""
    out_dir = Path(out_dir)
    teacher, teacher_run = load_teacher(teacher_dir)
    task: TaskConfig = cfg.task or teacher_run.task
    cfg = cfg.model_copy(update={"task": task})
    train, val = make_task_data(task, cfg.student.vocab)
    result = distill_student(teacher, cfg, train, val)
    save_model(result.model, out_dir)
    storage.write_metrics_csv(out_dir / "metrics.csv", result.metrics, distill=True)
    storage.write_alphas_csv(out_dir / "alphas.csv", result.metrics.alphas)
    storage.write_model_json(out_dir / "config.json", cfg)
    return result
