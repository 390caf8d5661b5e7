import csv
import json
import math
from pathlib import Path

import pytest

from backend import cli
from shared.schemas.config import DistillRunConfig, TeacherRunConfig
from shared.schemas.reports import ChainLink, SandwichReport
from shared.utils import storage
from shared.utils.errors import NumericError

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture
def teacher_dir(tmp_path, run_configs):
    teacher_path, _ = run_configs
    out = tmp_path / "teacher"
    assert cli.main(["train-teacher", "--config", str(teacher_path), "--out", str(out)]) == 0
    return out


def test_train_teacher_outputs(teacher_dir):
    rows = read_csv(teacher_dir / "metrics.csv")
    assert rows[0] == ["step", "task_loss", "val_loss"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3", "4", "5"]
    assert [r[2] != "" for r in rows[1:]] == [False, False, True, False, False, True]
    params = json.loads((teacher_dir / "params.json").read_text())
    assert params["dtype"] == "f32"
    assert params["byte_order"] == "little"
    assert (teacher_dir / "params.bin").stat().st_size == 4 * sum(
        math.prod(t["shape"]) for t in params["tensors"]
    )


def test_train_teacher_is_byte_identical(tmp_path, run_configs, teacher_dir):
    teacher_path, _ = run_configs
    again = tmp_path / "again"
    assert cli.main(["train-teacher", "--config", str(teacher_path), "--out", str(again)]) == 0
    for name in ("params.bin", "params.json", "metrics.csv", "config.json"):
        assert (again / name).read_bytes() == (teacher_dir / name).read_bytes()


def test_distill_outputs(tmp_path, run_configs, teacher_dir):
    _, distill_path = run_configs
    out = tmp_path / "student"
    assert cli.main(["distill", "--teacher", str(teacher_dir), "--config", str(distill_path), "--out", str(out)]) == 0
    rows = read_csv(out / "metrics.csv")
    assert rows[0] == ["step", "task_loss", "shd_loss", "aux_loss", "total_loss", "val_loss"]
    alphas = read_csv(out / "alphas.csv")
    assert alphas[0] == ["step", "layer", "group", "sample", "alpha"]
    assert len(alphas) > 1
    assert all(0.0 <= float(r[4]) <= 1.0 for r in alphas[1:])
    config = json.loads((out / "config.json").read_text())
    assert config["task"]["kind"] == "copy"


def test_distill_constant_strategy_override(tmp_path, run_configs, teacher_dir):
    _, distill_path = run_configs
    out = tmp_path / "constant"
    code = cli.main([
        "distill", "--teacher", str(teacher_dir), "--config", str(distill_path), "--out", str(out),
        "--strategy", "constant", "--attn-loss", "mse",
    ])
    assert code == 0
    assert all(r[4] == "0.5" for r in read_csv(out / "alphas.csv")[1:])
    assert json.loads((out / "config.json").read_text())["distill"]["attn_loss_kind"] == "mse"


def test_missing_config_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert cli.main(["train-teacher", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_invalid_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"student": {"vocab": 8, "d_model": 8, "h": 3, "d": 4, "layers": 1, "max_seq": 8}}))
    assert cli.main(["distill", "--teacher", str(tmp_path), "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_usage_errors_exit_2(tmp_path):
    assert cli.main([]) == 2
    assert cli.main(["oracle"]) == 2
    assert cli.main(["squeeze", "--dump", str(tmp_path), "--target-heads", "x", "--out", str(tmp_path)]) == 2


def test_numeric_failure_exits_3(tmp_path, run_configs, monkeypatch):
    teacher_path, _ = run_configs

    def diverge(cfg, out_dir):
        raise NumericError("Training diverged at step 0")

    monkeypatch.setattr(cli, "run_teacher", diverge)
    assert cli.main(["train-teacher", "--config", str(teacher_path), "--out", str(tmp_path / "t")]) == 3


def test_random_dump_oracle_and_analysis(tmp_path, capsys):
    dump = tmp_path / "dump"
    assert cli.main(["analyze", "--make-random", "--out", str(dump), "--layers", "1", "--heads", "2",
                     "--seq-len", "6", "--d-model", "8", "--seed", "3"]) == 0
    code = cli.main(["oracle", "--dump", str(dump), "--layer", "0", "--group", "0,1",
                     "--grid-step", "1e-3"])
    out = capsys.readouterr().out
    assert code == 0
    assert out.strip().splitlines()[-1] == "PASS"
    assert "E_closed" in out

    report_path = tmp_path / "report.json"
    assert cli.main(["analyze", "--dump", str(dump), "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["heads"] == 2
    assert len(report["layers"]) == 1


def test_oracle_failure_exits_3(tmp_path, monkeypatch):
    dump = tmp_path / "dump"
    assert cli.main(["analyze", "--make-random", "--out", str(dump), "--layers", "1", "--heads", "2"]) == 0
    failed = SandwichReport(
        heads=2, seq_len=8, values={"E_closed": 1.0}, links=[ChainLink(lower="a", upper="b", ok=False)], passed=False
    )
    monkeypatch.setattr(cli, "check_instance", lambda *args, **kwargs: failed)
    assert cli.main(["oracle", "--dump", str(dump)]) == 3


def test_oracle_bad_group_exits_2(tmp_path):
    dump = tmp_path / "dump"
    cli.main(["analyze", "--make-random", "--out", str(dump), "--layers", "1", "--heads", "2"])
    assert cli.main(["oracle", "--dump", str(dump), "--group", "0,7"]) == 2
    assert cli.main(["oracle", "--dump", str(dump), "--group", "a,b"]) == 2


def test_squeeze_same_head_count_is_byte_identical(tmp_path):
    dump = tmp_path / "dump"
    cli.main(["analyze", "--make-random", "--out", str(dump), "--layers", "2", "--heads", "3", "--d-model", "12"])
    out = tmp_path / "squeezed"
    assert cli.main(["squeeze", "--dump", str(dump), "--target-heads", "3", "--out", str(out)]) == 0
    assert (out / "layer1_maps.f32").read_bytes() == (dump / "layer1_maps.f32").read_bytes()
    assert cli.main(["squeeze", "--dump", str(dump), "--target-heads", "4", "--out", str(out)]) == 2


def test_export_dump_from_trained_teacher(tmp_path, teacher_dir):
    out = tmp_path / "tdump"
    assert cli.main(["export-dump", "--model", str(teacher_dir), "--out", str(out), "--samples", "3"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert (manifest["layers"], manifest["heads"], manifest["samples"], manifest["seq_len"]) == (2, 3, 3, 8)
    assert manifest["causal"] is True


def test_compare_writes_tables(tmp_path, run_configs):
    teacher_path, distill_path = run_configs
    out = tmp_path / "cmp"
    code = cli.main([
        "compare", "--teacher-config", str(teacher_path), "--distill-config", str(distill_path),
        "--out", str(out), "--seeds", "0", "--steps", "2", "--variants", "no-kd", "kd+shd",
    ])
    assert code == 0
    summary = read_csv(out / "compare.csv")
    assert summary[0] == ["variant", "runs", "mean_val_loss", "std_val_loss", "mean_step_time_ms", "trainable_params"]
    assert [r[0] for r in summary[1:]] == ["no-kd", "kd+shd"]
    assert read_csv(out / "cost.csv")[0] == ["variant", "mean_step_time_ms", "trainable_params"]
    assert len(read_csv(out / "runs.csv")) == 3


def test_sweep_grid_parsing(tmp_path, run_configs):
    teacher_path, distill_path = run_configs
    code = cli.main([
        "sweep", "--teacher-config", str(teacher_path), "--distill-config", str(distill_path),
        "--out", str(tmp_path / "sw"), "--steps", "2", "--grid", "1:0.5",
    ])
    assert code == 0
    rows = read_csv(tmp_path / "sw" / "sweep.csv")
    assert rows[0] == ["attn_temperature", "beta", "runs", "mean_val_loss", "std_val_loss"]
    assert rows[1][:2] == ["1.0", "0.5"]
    assert cli.main([
        "sweep", "--teacher-config", str(teacher_path), "--distill-config", str(distill_path),
        "--out", str(tmp_path / "sw"), "--grid", "oops",
    ]) == 2


def test_shipped_configs_parse_with_default_hyperparameters():
    for name in ("teacher_copy.json", "teacher_lm.json"):
        storage.read_model_json(CONFIG_DIR / name, TeacherRunConfig)
    distill = storage.read_model_json(CONFIG_DIR / "distill_shd.json", DistillRunConfig)
    assert (distill.distill.attn_temperature, distill.distill.beta) == (2.0, 2.0)
    storage.read_model_json(CONFIG_DIR / "distill_lm.json", DistillRunConfig)
