"""Exact reference solvers for the head-compression objective.

Slow by construction; used by tests, the ``oracle`` command and the analysis
service, never inside training.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from shared.schemas.reports import ChainLink, SandwichReport
from shared.utils import storage
from shared.utils.errors import DomainError, ShapeError, shape_of
from shared.utils.numkernel import (
    DTYPE,
    PINV_RTOL,
    as_matrix,
    causal_mask,
    least_squares_rows,
    simplex_project,
    softmax_rows,
)

from .attention import AttentionParams, attention_maps, head_values
from .squeeze import merge_energy, merge_group, pairwise_alpha, literal_form_alpha

logger = logging.getLogger(__name__)

# Desk-scale guard for the projected-gradient oracle.
MAX_CONSTRAINED_TOKENS = 64
POWER_ITERATIONS = 20
GRID_CHUNK = 1024


@dataclass(frozen=True)
class CompressionInstance:
    """Heads to be replaced by one map: find A with A P close to target."""

    maps: torch.Tensor  # (k, N, N)
    head_vals: torch.Tensor  # (k, N, d_model)
    target: torch.Tensor  # sum_i A_i X_i
    p: torch.Tensor  # sum_i X_i

    @property
    def seq_len(self) -> int:
        return self.maps.shape[-1]

    @property
    def num_heads(self) -> int:
        return self.maps.shape[0]


def make_instance(maps: Sequence[torch.Tensor], head_vals: Sequence[torch.Tensor]) -> CompressionInstance:
    a = torch.stack([as_matrix(m) for m in maps])
    x = torch.stack([as_matrix(v) for v in head_vals])
    if a.dim() != 3 or x.dim() != 3 or a.shape[0] != x.shape[0]:
        raise ShapeError(f"instance needs k maps and k head values, got {shape_of(a)} and {shape_of(x)}")
    if a.shape[-1] != a.shape[-2] or a.shape[-1] != x.shape[-2]:
        raise ShapeError(f"maps {shape_of(a)} do not act on head values {shape_of(x)}")
    return CompressionInstance(maps=a, head_vals=x, target=(a @ x).sum(dim=0), p=x.sum(dim=0))


def random_instance(
    rng: np.random.Generator,
    heads: int,
    seq_len: int,
    d: int,
    d_model: int,
    causal: bool = False,
) -> CompressionInstance:
    """Attention-shaped instance: softmax maps from rank-d scores, X_i of rank d."""
    scale = 1.0 / math.sqrt(d_model)
    v = torch.from_numpy(rng.standard_normal((seq_len, d_model)))
    w_q, w_k, w_v = (torch.from_numpy(rng.standard_normal((d_model, heads * d))) * scale for _ in range(3))
    w_o = torch.from_numpy(rng.standard_normal((heads * d, d_model))) * scale
    if heads * d == d_model:
        params = AttentionParams(h=heads, w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o)
        return make_instance(list(attention_maps(v, params, causal)), list(head_values(v, params)))
    # Per-head width independent of d_model: build the heads one at a time.
    mask = causal_mask(seq_len) if causal else None
    maps, vals = [], []
    for i in range(heads):
        cols = slice(i * d, (i + 1) * d)
        logits = (v @ w_q[:, cols]) @ (v @ w_k[:, cols]).T / math.sqrt(d)
        maps.append(softmax_rows(logits, mask))
        vals.append((v @ w_v[:, cols]) @ w_o[cols, :])
    return make_instance(maps, vals)


def residual_energy(inst: CompressionInstance, a_tilde: torch.Tensor) -> float:
    a_tilde = as_matrix(a_tilde)
    n = inst.seq_len
    if tuple(a_tilde.shape) != (n, n):
        raise ShapeError(f"candidate map must be {n}x{n}, got {shape_of(a_tilde)}")
    return float(((a_tilde @ inst.p - inst.target) ** 2).sum())


def grid_search_alpha(a1, a2, x1, x2, step: float = 1e-4) -> Tuple[float, float]:
    """Scan alpha in {0, step, ..., 1}, evaluating the objective directly."""
    if not 0 < step <= 0.1:
        raise DomainError(f"grid step must lie in (0, 0.1], got {step}")
    a1, a2, x1, x2 = (as_matrix(t) for t in (a1, a2, x1, x2))
    count = int(math.floor(1.0 / step + 1e-9))
    grid = torch.arange(count + 1, dtype=DTYPE) * step
    if float(grid[-1]) < 1.0:
        grid = torch.cat([grid, torch.ones(1, dtype=DTYPE)])
    grid = grid.clamp(max=1.0)
    total = x1 + x2
    target = a1 @ x1 + a2 @ x2
    energies = []
    for chunk in grid.split(GRID_CHUNK):
        w = chunk[:, None, None]
        merged = w * a1 + (1.0 - w) * a2
        energies.append(((merged @ total - target) ** 2).sum(dim=(-2, -1)))
    energies = torch.cat(energies)
    best = int(torch.argmin(energies))
    return float(grid[best]), float(energies[best])


def exact_unconstrained(inst: CompressionInstance) -> Tuple[torch.Tensor, float]:
    """Minimum-norm least-squares map, no attention constraints."""
    a_tilde = least_squares_rows(inst.p, inst.target)
    return a_tilde, residual_energy(inst, a_tilde)


def projection_residual(p: torch.Tensor, target: torch.Tensor) -> float:
    """|| target - proj_{rowspace(P)}(target) ||_F^2 from an orthonormal row-space basis."""
    _, s, vh = torch.linalg.svd(as_matrix(p), full_matrices=False)
    if float(s.max()) == 0.0:
        return float((target ** 2).sum())
    basis = vh[s > PINV_RTOL * s.max()]
    projected = (target @ basis.T) @ basis
    return float(((target - projected) ** 2).sum())


def _power_lambda_max(gram: torch.Tensor, iterations: int = POWER_ITERATIONS) -> float:
    v = torch.ones(gram.shape[0], dtype=DTYPE)
    lam = 0.0
    for _ in range(iterations):
        w = gram @ v
        norm = float(w.norm())
        if norm == 0.0:
            return 0.0
        lam = float(v @ w) / float(v @ v)
        v = w / norm
    return max(lam, float(v @ (gram @ v)))


def _row_objective(a: torch.Tensor, inst: CompressionInstance) -> torch.Tensor:
    return 0.5 * ((a @ inst.p - inst.target) ** 2).sum(dim=-1)


def constrained_solve(
    inst: CompressionInstance,
    max_iters: int = 50_000,
    tol: float = 1e-12,
    start: Optional[torch.Tensor] = None,
    warm_start: bool = False,
    debug: bool = False,
) -> Tuple[torch.Tensor, float]:
    """Row-stochastic map minimising the objective, by projected gradient descent.

    Rows are independent problems min_{a in simplex} 1/2 ||a^T P - t^T||^2 and
    are iterated together. The step is 1/lambda_max(P P^T) from power
    iteration; a step that would raise any row objective doubles the estimate
    and is retried, so objectives never increase. The default start is the
    uniform map, independent of the closed form; ``warm_start`` starts from
    the closed-form merge of the instance's heads instead.
    """
    n = inst.seq_len
    if n > MAX_CONSTRAINED_TOKENS:
        raise DomainError("constrained oracle is desk-scale only")
    if max_iters < 1:
        raise DomainError(f"max_iters must be >= 1, got {max_iters}")

    if start is None and warm_start:
        start, _, _ = merge_group(list(inst.maps), list(inst.head_vals))
    elif start is None:
        start = torch.full((n, n), 1.0 / n, dtype=DTYPE)
    a = simplex_project(as_matrix(start).clone())
    gram = inst.p @ inst.p.T
    lam = _power_lambda_max(gram)
    if lam == 0.0:
        return a, residual_energy(inst, a)

    obj = _row_objective(a, inst)
    for it in range(max_iters):
        grad = (a @ inst.p - inst.target) @ inst.p.T
        while True:
            candidate = simplex_project(a - grad / lam)
            cand_obj = _row_objective(candidate, inst)
            if bool((cand_obj <= obj + 1e-15 * (1.0 + obj)).all()):
                break
            if lam > 1e200:
                candidate, cand_obj = a, obj
                break
            lam *= 2.0
            if debug:
                logger.debug(f"Iteration {it}: objective rose, step estimate doubled to 1/{lam:.3e}")
        improvement = float((obj - cand_obj).max())
        a, obj = candidate, torch.minimum(cand_obj, obj)
        if improvement < tol:
            logger.debug(f"Projected gradient converged after {it + 1} iterations")
            break
    return a, residual_energy(inst, a)


def sandwich_report(
    inst: CompressionInstance,
    grid_step: float = 1e-4,
    max_iters: int = 50_000,
    tol: float = 1e-12,
    modes: Sequence[str] = ("grid", "exact", "constrained"),
) -> SandwichReport:
    """Evaluate every solver on one instance and check the ordering chain.

    For two heads: unconstrained <= constrained <= E(alpha*) <= E(0.5) <=
    max(E(0), E(1)), plus E(alpha*) <= E(grid) and E(alpha*) <= E(literal form).
    Larger groups report the fold energy and skip the pairwise rows.
    """
    values = {}
    if inst.num_heads == 2:
        a1, a2 = inst.maps[0], inst.maps[1]
        x1, x2 = inst.head_vals[0], inst.head_vals[1]
        alpha, e_closed = pairwise_alpha(a1, a2, x1, x2)
        values["alpha_closed"] = float(alpha)
        values["E_closed"] = float(e_closed)
        values["E_0"] = float(merge_energy(a1, a2, x1, x2, 0.0))
        values["E_half"] = float(merge_energy(a1, a2, x1, x2, 0.5))
        values["E_1"] = float(merge_energy(a1, a2, x1, x2, 1.0))
        alpha_p, e_literal = literal_form_alpha(a1, a2, x1, x2)
        values["alpha_literal"] = float(alpha_p)
        values["E_literal"] = float(e_literal)
        if "grid" in modes:
            values["alpha_grid"], values["E_grid"] = grid_search_alpha(a1, a2, x1, x2, grid_step)
    else:
        merged, _, _ = merge_group(list(inst.maps), list(inst.head_vals))
        values["E_closed"] = residual_energy(inst, merged)
    if "exact" in modes:
        values["residual_unconstrained"] = exact_unconstrained(inst)[1]
    if "constrained" in modes:
        values["residual_constrained"] = constrained_solve(inst, max_iters, tol)[1]

    chain = [
        ("residual_unconstrained", "residual_constrained"),
        ("residual_constrained", "E_closed"),
        ("residual_unconstrained", "E_closed"),
        ("E_closed", "E_half"),
        ("E_closed", "E_grid"),
        ("E_closed", "E_literal"),
    ]
    links: List[ChainLink] = []
    for lo, hi in chain:
        if lo in values and hi in values:
            slack = 1e-8 * (1.0 + abs(values[hi]))
            links.append(ChainLink(lower=lo, upper=hi, ok=values[lo] <= values[hi] + slack))
    if {"E_half", "E_0", "E_1"} <= values.keys():
        upper = max(values["E_0"], values["E_1"])
        links.append(
            ChainLink(lower="E_half", upper="max(E_0, E_1)", ok=values["E_half"] <= upper + 1e-8 * (1.0 + upper))
        )
    passed = all(link.ok for link in links)
    return SandwichReport(heads=inst.num_heads, seq_len=inst.seq_len, values=values, links=links, passed=passed)


MODES = {
    "grid": ("grid",),
    "exact": ("exact",),
    "constrained": ("constrained",),
    "all": ("grid", "exact", "constrained"),
}


def load_instance(dump_dir, layer: int, group: Sequence[int], sample: int = 0) -> CompressionInstance:
    """Compression instance for ``group`` of dump layer ``layer`` (0-indexed) on one sample."""
    manifest, maps, vals = storage.read_dump(dump_dir)
    if not 0 <= layer < manifest.layers:
        raise DomainError(f"layer {layer} out of range for a dump with {manifest.layers} layers")
    if not 0 <= sample < manifest.samples:
        raise DomainError(f"sample {sample} out of range for a dump with {manifest.samples} samples")
    if len(group) == 0 or len(set(group)) != len(group) or any(not 0 <= h < manifest.heads for h in group):
        raise DomainError(f"group {list(group)} must be distinct head indices below {manifest.heads}")
    return make_instance([maps[layer][sample, h] for h in group], [vals[layer][sample, h] for h in group])


def check_instance(
    inst: CompressionInstance,
    mode: str = "all",
    grid_step: float = 1e-4,
    max_iters: int = 50_000,
    tol: float = 1e-12,
) -> SandwichReport:
    if mode not in MODES:
        raise DomainError(f"unknown oracle mode {mode!r}; choose from {sorted(MODES)}")
    report = sandwich_report(inst, grid_step, max_iters, tol, MODES[mode])
    for link in report.links:
        if not link.ok:
            logger.warning(f"Sandwich link {link.lower} <= {link.upper} violated")
    return report
