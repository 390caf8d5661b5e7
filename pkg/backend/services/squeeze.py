"""Squeeze h_t teacher attention maps into h_s supervision maps.

A pair of heads (A1, X1), (A2, X2) is replaced by A = a*A1 + (1-a)*A2 with the
coefficient minimising

    E(a) = || A (X1 + X2) - (A1 X1 + A2 X2) ||_F^2 = || a M + R ||_F^2,
    M = (A1 - A2)(X1 + X2),   R = (A2 - A1) X1.

Larger groups are merged by a left fold that accumulates X. All routines accept
leading batch dimensions, so per-sample coefficients come out of one call.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch

from shared.schemas.config import MergeStrategy
from shared.utils.errors import DomainError, ShapeError, shape_of
from shared.utils.numkernel import DTYPE, frobenius_inner, make_rng

from .attention import AttentionBundle

logger = logging.getLogger(__name__)

# Below this ||M||_F^2 the energy is flat in alpha and 0.5 is returned.
FLAT_ENERGY_NORM = 1e-18


Groups = List[List[int]]


@dataclass(frozen=True)
class MergePlan:
    groups: Tuple[Tuple[int, ...], ...]
    strategy: MergeStrategy = MergeStrategy.SHD
    seed: int = 0
    # HARD_SELECT: the teacher head kept for each group.
    selected: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        flat = sorted(i for g in self.groups for i in g)
        if any(len(g) == 0 for g in self.groups) or flat != list(range(len(flat))):
            raise DomainError(f"merge groups must partition the teacher heads, got {self.groups}")
        if self.strategy == MergeStrategy.HARD_SELECT:
            if self.selected is None or len(self.selected) != len(self.groups):
                raise DomainError("hard-select plan needs one selected head per group")
            if any(s not in g for s, g in zip(self.selected, self.groups)):
                raise DomainError(f"selected heads {self.selected} are not members of {self.groups}")

    @property
    def teacher_heads(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def student_heads(self) -> int:
        return len(self.groups)


@dataclass
class MergeResult:
    """Squeezed maps (..., h_s, N, N), fold coefficients and group residuals.

    ``alphas[g]`` has shape (..., len(group) - 1); ``residuals`` (..., h_s)
    holds || A_g sum_i X_i - sum_i A_i X_i ||_F^2 for each group.
    """

    maps: torch.Tensor
    alphas: List[torch.Tensor] = field(default_factory=list)
    residuals: Optional[torch.Tensor] = None


def partition_heads(h_t: int, h_s: int) -> Groups:
    """Contiguous groups, the first h_t mod h_s of them one head larger."""
    if h_s < 1 or h_t < 1:
        raise DomainError(f"head counts must be positive, got h_t={h_t}, h_s={h_s}")
    if h_s > h_t:
        raise DomainError(f"student has more heads ({h_s}) than teacher ({h_t})")
    base, extra = divmod(h_t, h_s)
    groups, start = [], 0
    for g in range(h_s):
        size = base + (1 if g < extra else 0)
        groups.append(list(range(start, start + size)))
        start += size
    return groups


def _check_pair(a1, a2, x1, x2):
    if a1.shape != a2.shape or x1.shape != x2.shape:
        raise ShapeError(
            f"pair shapes differ: maps {shape_of(a1)} / {shape_of(a2)}, values {shape_of(x1)} / {shape_of(x2)}"
        )
    if a1.shape[-1] != a1.shape[-2] or a1.shape[-1] != x1.shape[-2]:
        raise ShapeError(f"maps {shape_of(a1)} do not act on values {shape_of(x1)}")


def _energy(m: torch.Tensor, r: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    return ((alpha[..., None, None] * m + r) ** 2).sum(dim=(-2, -1))


def _alpha_from(m: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    mm = frobenius_inner(m, m)
    raw = -frobenius_inner(m, r) / mm.clamp_min(FLAT_ENERGY_NORM)
    return torch.where(mm < FLAT_ENERGY_NORM, torch.full_like(mm, 0.5), raw.clamp(0.0, 1.0))


def merge_energy(a1, a2, x1, x2, alpha) -> torch.Tensor:
    """E(alpha) in the factored form || alpha M + R ||_F^2."""
    _check_pair(a1, a2, x1, x2)
    m = (a1 - a2) @ (x1 + x2)
    r = (a2 - a1) @ x1
    return _energy(m, r, torch.as_tensor(alpha, dtype=DTYPE).expand(m.shape[:-2]))


def pairwise_alpha(a1, a2, x1, x2) -> Tuple[torch.Tensor, torch.Tensor]:
    """Closed-form clamped coefficient for merging two heads and its energy."""
    _check_pair(a1, a2, x1, x2)
    m = (a1 - a2) @ (x1 + x2)
    r = (a2 - a1) @ x1
    alpha = _alpha_from(m, r)
    return alpha, _energy(m, r, alpha)


def literal_form_alpha(a1, a2, x1, x2) -> Tuple[torch.Tensor, torch.Tensor]:
    """Coefficient from the literal residual term A2 X1 - A1 X2.

    The returned energy is the true objective at that coefficient. Only the
    oracle calls this.
    """
    _check_pair(a1, a2, x1, x2)
    m = (a1 - a2) @ (x1 + x2)
    alpha = _alpha_from(m, a2 @ x1 - a1 @ x2)
    return alpha, _energy(m, (a2 - a1) @ x1, alpha)


def merge_group(
    maps: Sequence[torch.Tensor],
    head_vals: Sequence[torch.Tensor],
    fixed_alpha: Optional[float] = None,
) -> Tuple[torch.Tensor, List[torch.Tensor], torch.Tensor]:
    """Left-fold a group of heads into one map.

    Returns the merged map, the coefficient of every fold step and the
    accumulated head value sum_i X_i. ``fixed_alpha`` replaces the closed form
    with a constant coefficient.
    """
    if len(maps) == 0:
        raise DomainError("cannot merge an empty group of heads")
    if len(maps) != len(head_vals):
        raise ShapeError(f"{len(maps)} maps but {len(head_vals)} head values")
    acc_map, acc_x = maps[0], head_vals[0]
    alphas: List[torch.Tensor] = []
    for a_next, x_next in zip(maps[1:], head_vals[1:]):
        if fixed_alpha is None:
            alpha, _ = pairwise_alpha(acc_map, a_next, acc_x, x_next)
        else:
            _check_pair(acc_map, a_next, acc_x, x_next)
            alpha = torch.full(acc_map.shape[:-2], float(fixed_alpha), dtype=DTYPE)
        w = alpha[..., None, None]
        acc_map = w * acc_map + (1.0 - w) * a_next
        acc_x = acc_x + x_next
        alphas.append(alpha)
    return acc_map, alphas, acc_x


def group_residual(maps: torch.Tensor, values: torch.Tensor, merged: torch.Tensor) -> torch.Tensor:
    """|| merged sum_i X_i - sum_i A_i X_i ||_F^2 for maps (..., k, N, N)."""
    target = (maps @ values).sum(dim=-3)
    return ((merged @ values.sum(dim=-3) - target) ** 2).sum(dim=(-2, -1))


def squeeze_heads(bundle: AttentionBundle, plan: MergePlan) -> MergeResult:
    """Apply ``plan`` to the bundle's (already tempered) maps."""
    maps, values = bundle.maps, bundle.head_values
    if maps.shape[-3] != plan.teacher_heads:
        raise ShapeError(f"plan covers {plan.teacher_heads} heads but the bundle has {maps.shape[-3]}")

    merged, alphas, residuals = [], [], []
    for g, group in enumerate(plan.groups):
        idx = list(group)
        g_maps, g_vals = maps[..., idx, :, :], values[..., idx, :, :]
        if plan.strategy == MergeStrategy.HARD_SELECT:
            out = maps[..., plan.selected[g], :, :]
            g_alpha = torch.zeros(*maps.shape[:-3], 0, dtype=DTYPE)
        else:
            fixed = 0.5 if plan.strategy == MergeStrategy.CONSTANT_HALF else None
            out, fold_alphas, _ = merge_group(
                [maps[..., i, :, :] for i in idx],
                [values[..., i, :, :] for i in idx],
                fixed_alpha=fixed,
            )
            if fold_alphas:
                g_alpha = torch.stack(fold_alphas, dim=-1)
            else:
                g_alpha = torch.zeros(*maps.shape[:-3], 0, dtype=DTYPE)
        merged.append(out)
        alphas.append(g_alpha)
        residuals.append(group_residual(g_maps, g_vals, out))

    return MergeResult(
        maps=torch.stack(merged, dim=-3),
        alphas=alphas,
        residuals=torch.stack(residuals, dim=-1),
    )


def head_similarity(maps: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of flattened maps, (..., h, N, N) -> (..., h, h)."""
    if maps.dim() < 3 or maps.shape[-3] < 2:
        raise ShapeError(f"need at least two maps stacked on dim -3, got {shape_of(maps)}")
    flat = maps.flatten(-2)
    norms = flat.norm(dim=-1)
    if bool((norms == 0).any()):
        raise DomainError("head_similarity: zero-norm attention map")
    unit = flat / norms[..., None]
    sim = unit @ unit.transpose(-2, -1)
    sim = 0.5 * (sim + sim.transpose(-2, -1))
    eye = torch.eye(sim.shape[-1], dtype=torch.bool)
    return sim.masked_fill(eye, 1.0)


def match_heads(sim: torch.Tensor, h_s: int) -> Groups:
    """Greedy similarity grouping with the partition_heads size profile.

    Each group of size >= 2 is opened with the most similar unassigned pair and
    extended with the unassigned head of highest mean similarity to it. Ties go
    to the lowest index. Groups are returned sorted by their first head.
    """
    h_t = sim.shape[-1]
    sizes = [len(g) for g in partition_heads(h_t, h_s)]
    s = sim.detach().to(DTYPE)
    free = list(range(h_t))
    groups: Groups = []
    for size in sizes:
        if size == 1:
            groups.append([free.pop(0)])
            continue
        best = None
        for a_pos, i in enumerate(free):
            for j in free[a_pos + 1:]:
                if best is None or float(s[i, j]) > best[0]:
                    best = (float(s[i, j]), i, j)
        group = [best[1], best[2]]
        free.remove(best[1])
        free.remove(best[2])
        while len(group) < size:
            k = max(free, key=lambda c: (float(s[c, group].mean()), -c))
            group.append(k)
            free.remove(k)
        groups.append(sorted(group))
    return sorted(groups, key=lambda g: g[0])


def build_plan(
    h_t: int,
    h_s: int,
    strategy: MergeStrategy = MergeStrategy.SHD,
    seed: int = 0,
    calibration_maps: Optional[torch.Tensor] = None,
    rng=None,
) -> MergePlan:
    """Fix the grouping (and hard-select choices) once, before training.

    ``calibration_maps`` (..., h_t, N, N) is required for HEAD_MATCH; the
    per-sample similarities are averaged over the leading dimensions. ``rng``
    lets several layers draw hard-select choices from one stream.
    """
    strategy = MergeStrategy(strategy)
    selected = None
    if strategy == MergeStrategy.HEAD_MATCH:
        if calibration_maps is None:
            raise DomainError("head matching needs calibration maps")
        if h_s == h_t:
            groups = partition_heads(h_t, h_s)
        else:
            sim = head_similarity(calibration_maps)
            sim = sim.reshape(-1, h_t, h_t).mean(dim=0)
            groups = match_heads(sim, h_s)
    else:
        groups = partition_heads(h_t, h_s)
    if strategy == MergeStrategy.HARD_SELECT:
        rng = rng if rng is not None else make_rng(seed)
        selected = tuple(g[int(rng.integers(len(g)))] for g in groups)
        logger.info(f"Hard-select heads {selected} from groups {groups}")
    return MergePlan(
        groups=tuple(tuple(g) for g in groups),
        strategy=strategy,
        seed=seed,
        selected=selected,
    )
