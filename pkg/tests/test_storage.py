import json

import numpy as np
import pytest
import torch

from shared.schemas.config import DistillRunConfig, MergeStrategy, TeacherRunConfig
from shared.schemas.dump import DumpManifest
from shared.schemas.metrics import AlphaRecord, RunMetrics, StepRecord, ValidationRecord
from shared.utils import storage
from shared.utils.errors import ConfigError, ShapeError
from shared.utils.numkernel import DTYPE


def test_dump_roundtrip_is_f32_exact(tmp_path):
    maps = [torch.rand(2, 3, 4, 4, dtype=DTYPE) for _ in range(2)]
    vals = [torch.randn(2, 3, 4, 6, dtype=DTYPE) for _ in range(2)]
    manifest = storage.write_dump(tmp_path, maps, vals, causal=True)
    assert manifest.files[1].maps == "layer1_maps.f32"
    assert (tmp_path / "layer0_maps.f32").stat().st_size == 2 * 3 * 4 * 4 * 4
    read, maps_back, vals_back = storage.read_dump(tmp_path)
    assert read == manifest
    assert torch.equal(maps_back[1], maps[1].float().double())
    assert torch.equal(vals_back[0], vals[0].float().double())


def test_dump_file_is_little_endian_c_order(tmp_path):
    maps = torch.arange(16, dtype=DTYPE).reshape(1, 1, 4, 4)
    storage.write_dump(tmp_path, [maps], [torch.zeros(1, 1, 4, 2, dtype=DTYPE)])
    raw = np.fromfile(tmp_path / "layer0_maps.f32", dtype="<f4")
    assert raw.tolist() == list(range(16))


def test_dump_size_mismatch_is_a_config_error(tmp_path):
    storage.write_dump(tmp_path, [torch.rand(1, 2, 3, 3, dtype=DTYPE)], [torch.rand(1, 2, 3, 5, dtype=DTYPE)])
    with open(tmp_path / "layer0_values.f32", "ab") as f:
        f.write(b"\0\0\0\0")
    with pytest.raises(ConfigError):
        storage.read_dump(tmp_path)


def test_dump_manifest_validation(tmp_path):
    with pytest.raises(ValueError):
        DumpManifest(layers=2, heads=1, seq_len=2, d_model=2, files=[])
    (tmp_path / "manifest.json").write_text(json.dumps({"layers": 1, "heads": 1, "seq_len": 2, "d_model": 2}))
    with pytest.raises(ConfigError):
        storage.read_dump(tmp_path)


def test_dump_layers_must_agree(tmp_path):
    with pytest.raises(ShapeError):
        storage.write_dump(
            tmp_path,
            [torch.rand(1, 2, 3, 3, dtype=DTYPE), torch.rand(1, 2, 4, 4, dtype=DTYPE)],
            [torch.rand(1, 2, 3, 5, dtype=DTYPE), torch.rand(1, 2, 4, 5, dtype=DTYPE)],
        )


def test_params_roundtrip(tmp_path):
    tensors = [("a", torch.randn(3, 4, dtype=DTYPE)), ("b", torch.randn(5, dtype=DTYPE))]
    manifest = storage.save_params(tmp_path, {"kind": "test"}, tensors)
    assert [t.offset for t in manifest.tensors] == [0, 48]
    loaded_manifest, loaded = storage.load_params(tmp_path)
    assert loaded_manifest.config == {"kind": "test"}
    assert torch.equal(loaded["a"], tensors[0][1].float().double())
    assert tuple(loaded["b"].shape) == (5,)


def test_metrics_csv_headers_and_empty_validation_cells(tmp_path):
    metrics = RunMetrics(
        steps=[StepRecord(step=i, task_loss=1.0 / (i + 1), shd_loss=0.5, aux_loss=0.25, total_loss=2.0) for i in range(3)],
        validations=[ValidationRecord(step=2, val_loss=0.75)],
    )
    storage.write_metrics_csv(tmp_path / "t.csv", metrics, distill=False)
    storage.write_metrics_csv(tmp_path / "d.csv", metrics, distill=True)
    teacher_lines = (tmp_path / "t.csv").read_text().splitlines()
    distill_lines = (tmp_path / "d.csv").read_text().splitlines()
    assert teacher_lines[0] == "step,task_loss,val_loss"
    assert teacher_lines[1] == "0,1.0,"
    assert teacher_lines[3] == "2,0.3333333333333333,0.75"
    assert distill_lines[0] == "step,task_loss,shd_loss,aux_loss,total_loss,val_loss"
    rows = storage.read_metrics_csv(tmp_path / "d.csv")
    assert rows[0]["val_loss"] is None
    assert rows[2] == {
        "step": 2, "task_loss": 1.0 / 3, "shd_loss": 0.5, "aux_loss": 0.25, "total_loss": 2.0, "val_loss": 0.75
    }


def test_alphas_csv(tmp_path):
    storage.write_alphas_csv(tmp_path / "a.csv", [AlphaRecord(step=0, layer=2, group=1, sample=3, alpha=0.125)])
    assert (tmp_path / "a.csv").read_text() == "step,layer,group,sample,alpha\n0,2,1,3,0.125\n"


def test_read_model_json_errors(tmp_path):
    with pytest.raises(ConfigError) as err:
        storage.read_model_json(tmp_path / "missing.json", TeacherRunConfig)
    assert "missing.json" in str(err.value)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"vocab": 8, "d_model": 8, "h": 2, "d": 4, "layers": 1, "max_seq": 16}, "stepz": 3}))
    with pytest.raises(ConfigError):
        storage.read_model_json(bad, TeacherRunConfig)


def test_storage_resolve_and_list_runs(tmp_path):
    backend = storage.LocalStorageBackend(str(tmp_path))
    assert backend.resolve("runs/a") == (tmp_path / "runs" / "a").resolve()
    with pytest.raises(ConfigError):
        backend.resolve("../outside")
    metrics = RunMetrics(
        steps=[StepRecord(step=0, task_loss=2.0, total_loss=2.0)],
        validations=[ValidationRecord(step=0, val_loss=1.5)],
    )
    storage.write_metrics_csv(tmp_path / "runs" / "a" / "metrics.csv", metrics, distill=True)
    runs = backend.list_runs()
    assert len(runs) == 1
    assert runs[0]["name"] == "runs/a"
    assert runs[0]["kind"] == "distill"
    assert runs[0]["final_val_loss"] == 1.5


def test_alpha_histograms():
    metrics = RunMetrics(alphas=[
        AlphaRecord(step=0, layer=1, group=0, sample=0, alpha=0.0),
        AlphaRecord(step=0, layer=1, group=0, sample=1, alpha=1.0),
        AlphaRecord(step=0, layer=3, group=0, sample=0, alpha=0.5),
    ])
    hist = metrics.alpha_histograms(bins=4)
    assert hist == {1: [1, 0, 0, 1], 3: [0, 0, 1, 0]}


def test_dump_entries_must_stay_inside_the_dump(tmp_path):
    storage.write_dump(tmp_path / "d", [torch.rand(1, 2, 3, 3, dtype=DTYPE)], [torch.rand(1, 2, 3, 5, dtype=DTYPE)])
    (tmp_path / "outside.f32").write_bytes((tmp_path / "d" / "layer0_maps.f32").read_bytes())
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    manifest["files"][0]["maps"] = "../outside.f32"
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ConfigError) as err:
        storage.read_dump(tmp_path / "d")
    assert "outside" in str(err.value)


def test_distill_strategy_is_parsed_into_the_enum(tmp_path):
    path = tmp_path / "d.json"
    student = {"vocab": 8, "d_model": 8, "h": 2, "d": 4, "layers": 1, "max_seq": 8}
    path.write_text(json.dumps({"student": student, "distill": {"strategy": "hard-select"}}))
    cfg = storage.read_model_json(path, DistillRunConfig)
    assert cfg.distill.strategy is MergeStrategy.HARD_SELECT
    assert json.loads(cfg.model_dump_json())["distill"]["strategy"] == "hard-select"
    path.write_text(json.dumps({"student": student, "distill": {"strategy": "random"}}))
    with pytest.raises(ConfigError):
        storage.read_model_json(path, DistillRunConfig)
