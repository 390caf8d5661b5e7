"""Command-line entry point: ``python -m backend.cli <command> ...``.

Exit codes: 0 success, 2 usage/config/shape/domain errors, 3 numeric failures.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from shared.schemas.config import DistillConfig, DistillRunConfig, TaskConfig, TeacherRunConfig
from shared.utils import storage
from shared.utils.errors import ConfigError, DomainError, NumericError, ShapeError

from .services.analyzer import analyze_dump, make_random_dump, squeeze_dump
from .services.datasets import make_task_data
from .services.experiments import (
    DEFAULT_SWEEP,
    DEFAULT_VARIANTS,
    compare_variants,
    cost_report,
    format_table,
    sweep_hyperparameters,
)
from .services.oracle import MODES, check_instance, load_instance
from .services.squeeze import MergeStrategy
from .services.trainer import export_dump, grad_check, load_model, run_distill, run_teacher

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

GRAD_CHECK_TOLERANCE = 1e-4


def cmd_train_teacher(args) -> int:
    cfg = storage.read_model_json(args.config, TeacherRunConfig)
    result = run_teacher(cfg, args.out)
    print(f"teacher saved to {args.out}; final val loss {result.metrics.final_val_loss}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = storage.read_model_json(args.config, DistillRunConfig)
    overrides = {}
    if args.strategy:
        overrides["strategy"] = args.strategy
    if args.attn_loss:
        overrides["attn_loss_kind"] = args.attn_loss
    if overrides:
        distill = DistillConfig.model_validate({**cfg.distill.model_dump(), **overrides})
        cfg = cfg.model_copy(update={"distill": distill})
    result = run_distill(cfg, args.teacher, args.out)
    print(f"student saved to {args.out}; final val loss {result.metrics.final_val_loss}")
    return EXIT_OK


def cmd_squeeze(args) -> int:
    manifest, _ = squeeze_dump(args.dump, args.target_heads, args.out, MergeStrategy(args.strategy), args.seed)
    print(f"squeezed {manifest.layers} layers to {manifest.heads} heads in {args.out}")
    return EXIT_OK


def parse_group(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise DomainError(f"--group must be comma-separated head indices, got {text!r}")


def cmd_oracle(args) -> int:
    inst = load_instance(args.dump, args.layer, parse_group(args.group), args.sample)
    report = check_instance(inst, args.mode, args.grid_step, args.max_iters, args.tol)
    width = max(len(k) for k in report.values)
    print(f"layer {args.layer}, group {args.group}, sample {args.sample}, N={report.seq_len}")
    for key, value in report.values.items():
        print(f"  {key.ljust(width)}  {value:.12e}")
    for link in report.links:
        print(f"  {'PASS' if link.ok else 'FAIL'}  {link.lower} <= {link.upper}")
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_analyze(args) -> int:
    if args.make_random:
        if not args.out:
            raise ConfigError("analyze --make-random needs --out <dir>")
        manifest = make_random_dump(
            args.out,
            layers=args.layers,
            heads=args.heads,
            seq_len=args.seq_len,
            d_model=args.d_model,
            seed=args.seed,
            causal=args.causal,
            samples=args.samples,
        )
        print(f"random dump with {manifest.layers} layers x {manifest.heads} heads written to {args.out}")
        return EXIT_OK
    if not args.dump:
        raise ConfigError("analyze needs --dump <dir> (or --make-random)")
    report = analyze_dump(args.dump)
    text = report.model_dump_json(indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
        print(f"report written to {args.out}")
    else:
        print(text)
    return EXIT_OK


def _task_for_model(model_dir: Path) -> Optional[TaskConfig]:
    config_path = Path(model_dir) / "config.json"
    if not config_path.exists():
        return None
    payload = json.loads(config_path.read_text())
    task = payload.get("task")
    return TaskConfig.model_validate(task) if task else None


def cmd_export_dump(args) -> int:
    model = load_model(args.model)
    task = _task_for_model(args.model) or TaskConfig(seq_len=model.config.max_seq)
    task = task.model_copy(update={"size": 1, "val_size": args.samples})
    _, val = make_task_data(task, model.config.vocab)
    manifest = export_dump(model, val.inputs, args.out)
    print(f"dump of {manifest.layers} layers x {manifest.heads} heads, {manifest.samples} samples in {args.out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    base = storage.read_model_json(args.config, DistillRunConfig).distill if args.config else None
    worst = 0.0
    for seed in args.seeds:
        report = grad_check(base, seed=seed)
        print(f"seed {seed}: max relative error {report.max_rel_error:.3e} ({report.worst_parameter}, {report.checked} entries)")
        worst = max(worst, report.max_rel_error)
    ok = worst <= GRAD_CHECK_TOLERANCE
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


def _load_experiment_configs(args):
    teacher_cfg = storage.read_model_json(args.teacher_config, TeacherRunConfig)
    distill_cfg = storage.read_model_json(args.distill_config, DistillRunConfig)
    return teacher_cfg, distill_cfg


SUMMARY_COLUMNS = ["variant", "runs", "mean_val_loss", "std_val_loss", "mean_step_time_ms", "trainable_params"]
RUN_COLUMNS = ["variant", "seed", "val_loss", "step_time_ms", "trainable_params"]
SWEEP_COLUMNS = ["attn_temperature", "beta", "runs", "mean_val_loss", "std_val_loss"]


def cmd_compare(args) -> int:
    teacher_cfg, distill_cfg = _load_experiment_configs(args)
    results, summaries = compare_variants(teacher_cfg, distill_cfg, args.variants, args.seeds, args.steps)
    out = Path(args.out)
    summary_rows = [s.model_dump() for s in summaries]
    storage.write_table_csv(out / "compare.csv", summary_rows, SUMMARY_COLUMNS)
    storage.write_table_csv(out / "runs.csv", [r.model_dump() for r in results], RUN_COLUMNS)
    storage.write_table_csv(out / "cost.csv", cost_report(results), ["variant", "mean_step_time_ms", "trainable_params"])
    print(format_table(summary_rows, SUMMARY_COLUMNS))
    return EXIT_OK


def parse_grid(items: List[str]):
    grid = []
    for item in items:
        try:
            t_a, beta = item.split(":")
            grid.append((float(t_a), float(beta)))
        except ValueError:
            raise DomainError(f"--grid entries look like T:beta, got {item!r}")
    return grid


def cmd_sweep(args) -> int:
    teacher_cfg, distill_cfg = _load_experiment_configs(args)
    grid = parse_grid(args.grid) if args.grid else DEFAULT_SWEEP
    rows = sweep_hyperparameters(teacher_cfg, distill_cfg, grid, args.seeds, args.steps)
    storage.write_table_csv(Path(args.out) / "sweep.csv", rows, SWEEP_COLUMNS)
    print(format_table(rows, SWEEP_COLUMNS))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("backend.main:app", host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shd-lab", description="Squeezing-heads distillation lab")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train a teacher model")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a student from a trained teacher")
    p.add_argument("--teacher", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--strategy", choices=[s.value for s in MergeStrategy])
    p.add_argument("--attn-loss", choices=["kl", "mse"])
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("squeeze", help="merge the heads of an attention dump")
    p.add_argument("--dump", required=True, type=Path)
    p.add_argument("--target-heads", required=True, type=int)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--strategy", default="shd", choices=[s.value for s in MergeStrategy])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_squeeze)

    p = sub.add_parser("oracle", help="check closed-form merging against reference solvers")
    p.add_argument("--dump", required=True, type=Path)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--group", default="0,1", help="comma-separated head indices")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--mode", default="all", choices=sorted(MODES))
    p.add_argument("--grid-step", type=float, default=1e-4)
    p.add_argument("--max-iters", type=int, default=50_000)
    p.add_argument("--tol", type=float, default=1e-12)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("analyze", help="head redundancy report, or write a random dump")
    p.add_argument("--dump", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--make-random", action="store_true")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--seq-len", type=int, default=8)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--causal", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export-dump", help="dump a trained model's attention on validation data")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--samples", type=int, default=8)
    p.set_defaults(func=cmd_export_dump)

    p = sub.add_parser("grad-check", help="compare autograd gradients with finite differences")
    p.add_argument("--config", type=Path, help="distill config whose loss settings are checked")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(func=cmd_grad_check)

    for name, func, help_text in (
        ("compare", cmd_compare, "distill one teacher with several ablation variants"),
        ("sweep", cmd_sweep, "attention temperature / beta sensitivity"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--teacher-config", required=True, type=Path)
        p.add_argument("--distill-config", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4] if name == "compare" else [0])
        p.add_argument("--steps", type=int)
        if name == "compare":
            p.add_argument("--variants", nargs="+", default=list(DEFAULT_VARIANTS))
        else:
            p.add_argument("--grid", nargs="+", help="T:beta pairs")
        p.set_defaults(func=func)

    p = sub.add_parser("serve", help="run the HTTP analysis service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        return args.func(args)
    except (ConfigError, ShapeError, DomainError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
