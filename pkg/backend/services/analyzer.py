"""Dump tools: head-redundancy statistics, offline squeezing and synthetic dumps."""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from shared.schemas.dump import DumpManifest
from shared.schemas.reports import AlphaHistogram, AnalysisReport, LayerAnalysis
from shared.utils import storage
from shared.utils.errors import DomainError
from shared.utils.numkernel import make_rng

from .attention import AttentionBundle
from .oracle import random_instance
from .squeeze import MergeStrategy, build_plan, head_similarity, pairwise_alpha, squeeze_heads

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 20


def adjacent_pairs(heads: int) -> List[tuple]:
    """(0, 1), (2, 3), ...; an odd last head is left out."""
    return [(i, i + 1) for i in range(0, heads - 1, 2)]


def analyze_layer(layer: int, maps: torch.Tensor, values: torch.Tensor) -> LayerAnalysis:
    """Similarity matrix averaged over samples and alpha histogram of adjacent-pair merges."""
    heads = maps.shape[-3]
    if heads >= 2:
        sim = head_similarity(maps).reshape(-1, heads, heads).mean(dim=0)
        off = ~torch.eye(heads, dtype=torch.bool)
        mean_off: Optional[float] = float(sim[off].mean())
    else:
        sim = torch.ones(1, 1, dtype=maps.dtype)
        mean_off = None

    alphas = []
    for i, j in adjacent_pairs(heads):
        a, _ = pairwise_alpha(maps[..., i, :, :], maps[..., j, :, :], values[..., i, :, :], values[..., j, :, :])
        alphas.extend(a.reshape(-1).tolist())
    counts, edges = np.histogram(alphas, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    return LayerAnalysis(
        layer=layer,
        similarity=sim.tolist(),
        mean_off_diagonal=mean_off,
        alpha_histogram=AlphaHistogram(edges=edges.tolist(), counts=counts.tolist()),
        alpha_count=len(alphas),
    )


def analyze_tensors(manifest: DumpManifest, layer_maps: Sequence[torch.Tensor], layer_values: Sequence[torch.Tensor]):
    layers = [analyze_layer(i, m, v) for i, (m, v) in enumerate(zip(layer_maps, layer_values))]
    return AnalysisReport(layers=layers, heads=manifest.heads, samples=manifest.samples, seq_len=manifest.seq_len)


def analyze_dump(dump_dir: Path) -> AnalysisReport:
    manifest, maps, values = storage.read_dump(dump_dir)
    report = analyze_tensors(manifest, maps, values)
    for layer in report.layers:
        logger.info(f"Layer {layer.layer}: mean off-diagonal similarity {layer.mean_off_diagonal}")
    return report


def make_random_dump(
    out_dir: Path,
    layers: int = 2,
    heads: int = 4,
    seq_len: int = 8,
    d_model: int = 16,
    seed: int = 0,
    causal: bool = False,
    samples: int = 1,
) -> DumpManifest:
    """Seeded synthetic dump of attention-shaped maps and head values."""
    if min(layers, heads, seq_len, d_model, samples) < 1:
        raise DomainError("random dump dimensions must be positive")
    rng = make_rng(seed)
    d = max(1, d_model // heads)
    layer_maps, layer_values = [], []
    for _ in range(layers):
        insts = [random_instance(rng, heads, seq_len, d, d_model, causal) for _ in range(samples)]
        layer_maps.append(torch.stack([inst.maps for inst in insts]))
        layer_values.append(torch.stack([inst.head_vals for inst in insts]))
    logger.info(f"Generated random dump: {layers} layers, {heads} heads, N={seq_len}, d_model={d_model}, seed={seed}")
    return storage.write_dump(out_dir, layer_maps, layer_values, causal=causal)


def squeeze_dump(
    dump_dir: Path,
    target_heads: int,
    out_dir: Path,
    strategy: MergeStrategy = MergeStrategy.SHD,
    seed: int = 0,
) -> Tuple[DumpManifest, dict]:
    """Merge every layer of a dump down to ``target_heads`` heads.

    Maps are squeezed as stored (no re-tempering); head values are summed per
    group. Returns the new manifest and the alpha record written to alphas.json.
    """
    manifest, layer_maps, layer_values = storage.read_dump(dump_dir)
    if target_heads < 1 or target_heads > manifest.heads:
        raise DomainError(f"target heads must lie in [1, {manifest.heads}], got {target_heads}")
    strategy = MergeStrategy(strategy)
    rng = make_rng(seed)
    out_maps, out_values, records = [], [], []
    for i, (maps, values) in enumerate(zip(layer_maps, layer_values)):
        plan = build_plan(manifest.heads, target_heads, strategy, seed, calibration_maps=maps, rng=rng)
        result = squeeze_heads(AttentionBundle(maps=maps, head_values=values, causal=manifest.causal), plan)
        out_maps.append(result.maps)
        out_values.append(torch.stack([values[:, list(g)].sum(dim=1) for g in plan.groups], dim=1))
        records.append({
            "layer": i,
            "groups": [list(g) for g in plan.groups],
            "selected": list(plan.selected) if plan.selected is not None else None,
            "alphas": [a.tolist() for a in result.alphas],
        })
    out_manifest = storage.write_dump(out_dir, out_maps, out_values, causal=manifest.causal)
    payload = {"strategy": strategy.value, "source_heads": manifest.heads, "target_heads": target_heads, "layers": records}
    storage.write_json(Path(out_dir) / "alphas.json", payload)
    return out_manifest, payload
