"""Distillation losses and the combined training objective.

The attention term compares student maps with squeezed teacher maps, both
recomputed at the attention temperature from cached logits:

    L_shd = beta * sum_layers mean_batch sum_heads KL(squeezed_teacher || student)

Teacher tensors (and therefore every merge coefficient) are constants.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from shared.schemas.config import AttnLossKind, Baseline, DistillConfig
from shared.utils.errors import DomainError, ShapeError, shape_of
from shared.utils.numkernel import DTYPE, causal_mask, cosine_similarity_flat

from .attention import AttentionBundle
from .squeeze import MergePlan, MergeResult, squeeze_heads

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-12


@dataclass(frozen=True)
class LayerMap:
    """(student_layer, teacher_layer) pairs, both 1-indexed."""

    pairs: Tuple[Tuple[int, int], ...]

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def teacher_layer(self, student_layer: int) -> int:
        return dict(self.pairs)[student_layer]


def layer_map(l_t: int, l_s: int) -> LayerMap:
    """Uniform stride: student layer s is supervised by teacher layer round(s * L_t / L_s)."""
    if l_s < 1 or l_t < 1:
        raise DomainError(f"layer counts must be positive, got L_t={l_t}, L_s={l_s}")
    if l_s > l_t:
        raise DomainError(f"student has more layers ({l_s}) than teacher ({l_t})")
    # Round half up; Python's round() would send 2.5 to 2.
    return LayerMap(tuple((s, int(math.floor(s * l_t / l_s + 0.5))) for s in range(1, l_s + 1)))


def attn_map_loss(
    teacher_map: torch.Tensor,
    student_map: torch.Tensor,
    kind=AttnLossKind.KL,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Per-map loss, reducing the last two dims.

    KL is the mean over rows of sum_j t log(t / s) with s floored at 1e-12 and
    0 log 0 = 0. MSE is the mean of squared differences over unmasked entries.
    """
    if teacher_map.shape != student_map.shape:
        raise ShapeError(f"attn_map_loss: teacher {shape_of(teacher_map)} vs student {shape_of(student_map)}")
    kind = AttnLossKind(kind)
    if kind == AttnLossKind.KL:
        rows = torch.xlogy(teacher_map, teacher_map) - teacher_map * torch.log(student_map.clamp_min(KL_FLOOR))
        if mask is not None:
            rows = rows * mask
        return rows.sum(dim=-1).mean(dim=-1)
    sq = (teacher_map - student_map) ** 2
    if mask is None:
        return sq.mean(dim=(-2, -1))
    mask = mask.to(DTYPE).expand_as(sq)
    return (sq * mask).sum(dim=(-2, -1)) / mask.sum(dim=(-2, -1))


def teacher_targets(
    teacher_bundles: Sequence[AttentionBundle],
    lm: LayerMap,
    plans: Sequence[MergePlan],
    temperature: float,
) -> List[MergeResult]:
    """Squeezed teacher maps for every mapped layer pair, detached."""
    results = []
    for (_, t_layer), plan in zip(lm, plans):
        bundle = teacher_bundles[t_layer - 1].detach().tempered(temperature)
        result = squeeze_heads(bundle, plan)
        result.maps = result.maps.detach()
        result.alphas = [a.detach() for a in result.alphas]
        results.append(result)
    return results


def shd_loss(
    teacher_bundles: Sequence[AttentionBundle],
    student_bundles: Sequence[AttentionBundle],
    cfg: DistillConfig,
    lm: LayerMap,
    plans: Sequence[MergePlan],
    targets: Optional[List[MergeResult]] = None,
) -> Tuple[torch.Tensor, List[MergeResult]]:
    """Attention-map distillation term and the merge results behind it.

    ``targets`` short-circuits squeezing when the teacher side was already
    computed for this batch.
    """
    if len(plans) != len(lm):
        raise ShapeError(f"{len(plans)} merge plans for {len(lm)} layer pairs")
    if targets is None:
        targets = teacher_targets(teacher_bundles, lm, plans, cfg.attn_temperature)
    total = torch.zeros((), dtype=DTYPE)
    if cfg.beta == 0:
        return total, targets
    for (s_layer, t_layer), target in zip(lm, targets):
        s_bundle = student_bundles[s_layer - 1].tempered(cfg.attn_temperature)
        if s_bundle.maps.shape != target.maps.shape:
            raise ShapeError(
                f"student layer {s_layer} maps {shape_of(s_bundle.maps)} vs squeezed teacher layer "
                f"{t_layer} maps {shape_of(target.maps)}"
            )
        mask = causal_mask(s_bundle.seq_len) if s_bundle.causal else None
        per_map = attn_map_loss(target.maps, s_bundle.maps, cfg.attn_loss_kind, mask)
        total = total + per_map.sum(dim=-1).mean()
    return cfg.beta * total, targets


def logit_kd_loss(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    temperature: float,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """T^2 * mean over valid positions of KL(softmax(t/T) || softmax(s/T))."""
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(f"logit_kd_loss: teacher {shape_of(teacher_logits)} vs student {shape_of(student_logits)}")
    if not temperature > 0:
        raise DomainError(f"logit temperature must be positive, got {temperature}")
    log_t = F.log_softmax(teacher_logits / temperature, dim=-1)
    log_s = F.log_softmax(student_logits / temperature, dim=-1)
    per_pos = (log_t.exp() * (log_t - log_s)).sum(dim=-1)
    if mask is None:
        kl = per_pos.mean()
    else:
        mask = mask.to(DTYPE)
        kl = (per_pos * mask).sum() / mask.sum().clamp_min(1.0)
    return kl * temperature ** 2


def correlation_matrix(f: torch.Tensor) -> torch.Tensor:
    """Cosine Gram matrix of feature rows."""
    norms = f.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise DomainError("self-correlation: zero-norm feature row")
    unit = f / norms
    return unit @ unit.transpose(-2, -1)


def self_correlation_loss(f_t: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
    """1 - cosine(Cor_t, Cor_s) per sample; feature widths may differ."""
    if f_t.shape[:-1] != f_s.shape[:-1]:
        raise ShapeError(f"self_correlation_loss: row counts differ, {shape_of(f_t)} vs {shape_of(f_s)}")
    return 1.0 - cosine_similarity_flat(correlation_matrix(f_t), correlation_matrix(f_s))


def projector_fd_loss(f_t: torch.Tensor, f_s: torch.Tensor, projector: torch.Tensor) -> torch.Tensor:
    """Mean squared error between F_s W and F_t."""
    if f_s.shape[-1] != projector.shape[0] or f_t.shape[-1] != projector.shape[1] or f_t.shape[:-1] != f_s.shape[:-1]:
        raise ShapeError(
            f"projector_fd_loss: F_t {shape_of(f_t)}, F_s {shape_of(f_s)}, projector {shape_of(projector)}"
        )
    return ((f_s @ projector - f_t) ** 2).mean()


@dataclass
class ObjectiveTerms:
    task: torch.Tensor
    shd: torch.Tensor
    aux: torch.Tensor
    merges: List[MergeResult] = field(default_factory=list)

    @property
    def total(self) -> torch.Tensor:
        return self.task + self.shd + self.aux


def baseline_loss(
    teacher_features: Sequence[torch.Tensor],
    student_features: Sequence[torch.Tensor],
    cfg: DistillConfig,
    lm: LayerMap,
    projectors: Optional[Dict[int, torch.Tensor]] = None,
) -> torch.Tensor:
    """Feature-distillation baseline summed over mapped layers, times ``baseline_weight``."""
    total = torch.zeros((), dtype=DTYPE)
    if cfg.baseline is None or cfg.baseline_weight == 0:
        return total
    for s_layer, t_layer in lm:
        f_t = teacher_features[t_layer - 1].detach()
        f_s = student_features[s_layer - 1]
        if cfg.baseline == Baseline.SELF_CORR:
            total = total + self_correlation_loss(f_t, f_s).mean()
        else:
            if projectors is None or s_layer not in projectors:
                raise DomainError(f"projector baseline needs a projector for student layer {s_layer}")
            total = total + projector_fd_loss(f_t, f_s, projectors[s_layer])
    return cfg.baseline_weight * total
