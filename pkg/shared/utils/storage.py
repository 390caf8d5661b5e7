"""Local file storage for dumps, model parameters and run metrics."""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ValidationError

from shared.schemas.dump import DumpManifest, LayerFiles, ParamsManifest, TensorEntry
from shared.schemas.metrics import AlphaRecord, RunMetrics

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

F32 = np.dtype("<f4")

TEACHER_METRICS_HEADER = ["step", "task_loss", "val_loss"]
DISTILL_METRICS_HEADER = ["step", "task_loss", "shd_loss", "aux_loss", "total_loss", "val_loss"]
ALPHAS_HEADER = ["step", "layer", "group", "sample", "alpha"]


def format_float(value: Optional[float]) -> str:
    """Shortest string that round-trips the double; empty for missing values."""
    return "" if value is None else repr(float(value))


def read_model_json(path: Path, model_cls):
    """Load and validate a JSON document, wrapping every failure in ConfigError."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"File not found: {path}")
    try:
        return model_cls.model_validate_json(path.read_text())
    except ValidationError as e:
        raise ConfigError(f"Invalid {model_cls.__name__} in {path}: {e}") from e


def write_model_json(path: Path, model: BaseModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(model.model_dump_json(indent=2))
        f.write("\n")
    return path


class LocalStorageBackend:
    """Filesystem storage rooted at ``data_dir``."""

    def __init__(self, data_dir: str = "data"):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        logger.debug(f"Initialized local storage at {self.data_dir.absolute()}")

    def resolve(self, relative: str) -> Path:
        """Resolve a user-supplied path, refusing anything outside ``data_dir``."""
        root = self.data_dir.resolve()
        target = (root / relative).resolve()
        if target != root and root not in target.parents:
            raise ConfigError(f"Path escapes the data directory: {relative}")
        return target

    def list_runs(self) -> List[dict]:
        """Run directories (those holding a metrics.csv), newest first."""
        runs = []
        for metrics_path in self.data_dir.rglob("metrics.csv"):
            run_dir = metrics_path.parent
            try:
                rows = read_metrics_csv(metrics_path)
            except Exception as e:
                logger.error(f"Error reading {metrics_path}: {e}")
                continue
            last = rows[-1] if rows else {}
            val = [r["val_loss"] for r in rows if r.get("val_loss") is not None]
            runs.append({
                "name": str(run_dir.relative_to(self.data_dir)),
                "kind": "distill" if "shd_loss" in last else "teacher",
                "steps": len(rows),
                "final_task_loss": last.get("task_loss"),
                "final_val_loss": val[-1] if val else None,
                "modified": metrics_path.stat().st_mtime,
            })
        runs.sort(key=lambda r: r["modified"], reverse=True)
        return runs


# Dumps

def _check_blob(path: Path, expected: int):
    if not path.exists():
        raise ConfigError(f"Dump file missing: {path}")
    size = path.stat().st_size
    if size != expected:
        raise ConfigError(f"Dump file {path} has {size} bytes, manifest implies {expected}")


def write_dump(
    out_dir: Path,
    layer_maps: Sequence[torch.Tensor],
    layer_values: Sequence[torch.Tensor],
    causal: bool = False,
) -> DumpManifest:
    """Write per-layer maps (samples, h, N, N) and head values (samples, h, N, d_model)."""
    if len(layer_maps) == 0 or len(layer_maps) != len(layer_values):
        raise ShapeError(f"need matching non-empty layer lists, got {len(layer_maps)} and {len(layer_values)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    first = layer_maps[0]
    samples, heads, n, _ = first.shape
    d_model = layer_values[0].shape[-1]
    files = []
    for i, (maps, vals) in enumerate(zip(layer_maps, layer_values)):
        if tuple(maps.shape) != (samples, heads, n, n) or tuple(vals.shape) != (samples, heads, n, d_model):
            raise ShapeError(f"layer {i}: maps {tuple(maps.shape)} / values {tuple(vals.shape)} disagree with layer 0")
        entry = LayerFiles(maps=f"layer{i}_maps.f32", head_values=f"layer{i}_values.f32")
        maps.detach().cpu().numpy().astype(F32).tofile(out_dir / entry.maps)
        vals.detach().cpu().numpy().astype(F32).tofile(out_dir / entry.head_values)
        files.append(entry)
    manifest = DumpManifest(
        layers=len(files),
        heads=heads,
        seq_len=n,
        d_model=d_model,
        samples=samples,
        causal=causal,
        files=files,
    )
    write_model_json(out_dir / "manifest.json", manifest)
    logger.info(f"Wrote dump with {manifest.layers} layers x {heads} heads to {out_dir}")
    return manifest


def _dump_file(dump_dir: Path, name: str) -> Path:
    path = (dump_dir / name).resolve()
    if not path.is_relative_to(dump_dir.resolve()):
        raise ConfigError(f"dump file {name!r} lies outside {dump_dir}")
    return path


def read_dump(dump_dir: Path) -> Tuple[DumpManifest, List[torch.Tensor], List[torch.Tensor]]:
    """Load a dump as float64 tensors after checking every file against the manifest."""
    dump_dir = Path(dump_dir)
    manifest = read_model_json(dump_dir / "manifest.json", DumpManifest)
    shape_maps = (manifest.samples, manifest.heads, manifest.seq_len, manifest.seq_len)
    shape_vals = (manifest.samples, manifest.heads, manifest.seq_len, manifest.d_model)
    maps, vals = [], []
    for entry in manifest.files:
        maps_path, vals_path = _dump_file(dump_dir, entry.maps), _dump_file(dump_dir, entry.head_values)
        _check_blob(maps_path, manifest.maps_bytes())
        _check_blob(vals_path, manifest.values_bytes())
        maps.append(torch.from_numpy(np.fromfile(maps_path, dtype=F32).reshape(shape_maps).astype(np.float64)))
        vals.append(torch.from_numpy(np.fromfile(vals_path, dtype=F32).reshape(shape_vals).astype(np.float64)))
    return manifest, maps, vals


# Parameters

def save_params(out_dir: Path, config: dict, tensors: Iterable[Tuple[str, torch.Tensor]]) -> ParamsManifest:
    """Write params.json plus params.bin (little-endian f32 blobs in manifest order)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(out_dir / "params.bin", "wb") as f:
        for name, t in tensors:
            blob = t.detach().cpu().numpy().astype(F32).tobytes()
            entries.append(TensorEntry(name=name, shape=list(t.shape), offset=offset))
            f.write(blob)
            offset += len(blob)
    manifest = ParamsManifest(config=config, tensors=entries)
    write_model_json(out_dir / "params.json", manifest)
    logger.info(f"Saved {len(entries)} parameter tensors ({offset} bytes) to {out_dir}")
    return manifest


def load_params(model_dir: Path) -> Tuple[ParamsManifest, Dict[str, torch.Tensor]]:
    model_dir = Path(model_dir)
    manifest = read_model_json(model_dir / "params.json", ParamsManifest)
    bin_path = model_dir / "params.bin"
    if not bin_path.exists():
        raise ConfigError(f"File not found: {bin_path}")
    raw = np.fromfile(bin_path, dtype=F32)
    tensors = {}
    for entry in manifest.tensors:
        start = entry.offset // F32.itemsize
        count = int(np.prod(entry.shape)) if entry.shape else 1
        if start + count > raw.size:
            raise ConfigError(f"params.bin is too short for tensor {entry.name}")
        arr = raw[start:start + count].reshape(entry.shape).astype(np.float64)
        tensors[entry.name] = torch.from_numpy(arr)
    return manifest, tensors


# Metrics

def write_metrics_csv(path: Path, metrics: RunMetrics, distill: bool) -> Path:
    """One row per step; ``val_loss`` is empty on steps without validation."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    val_by_step = {v.step: v.val_loss for v in metrics.validations}
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if distill:
            writer.writerow(DISTILL_METRICS_HEADER)
            for r in metrics.steps:
                writer.writerow([
                    r.step,
                    format_float(r.task_loss),
                    format_float(r.shd_loss),
                    format_float(r.aux_loss),
                    format_float(r.total_loss),
                    format_float(val_by_step.get(r.step)),
                ])
        else:
            writer.writerow(TEACHER_METRICS_HEADER)
            for r in metrics.steps:
                writer.writerow([r.step, format_float(r.task_loss), format_float(val_by_step.get(r.step))])
    logger.info(f"Wrote {len(metrics.steps)} metric rows to {path}")
    return path


def write_alphas_csv(path: Path, alphas: Sequence[AlphaRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ALPHAS_HEADER)
        for a in alphas:
            writer.writerow([a.step, a.layer, a.group, a.sample, format_float(a.alpha)])
    return path


def read_metrics_csv(path: Path) -> List[dict]:
    """Parse a metrics CSV into dicts of ints/floats, ``None`` for empty cells."""
    rows = []
    with open(path, newline="") as f:
        for raw in csv.DictReader(f):
            row = {}
            for key, value in raw.items():
                if value in ("", None):
                    row[key] = None
                elif key == "step":
                    row[key] = int(value)
                else:
                    row[key] = float(value)
            rows.append(row)
    return rows


def write_json(path: Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    logger.info(f"Saved {path}")
    return path


def write_table_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path
