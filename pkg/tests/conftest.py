"""Shared fixtures: seeded generators, tiny model configs and scratch dumps."""

import json

import pytest
import torch

from backend.services.analyzer import make_random_dump
from shared.schemas.config import TinyTransformerConfig
from shared.utils.numkernel import make_rng, random_matrix, random_stochastic


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def make_bundle_tensors():
    """(maps, values) of shape (samples, heads, N, N) and (samples, heads, N, d_model)."""

    def make(seed, samples, heads, seq_len, d_model, concentration=1.0):
        gen = make_rng(seed)
        maps = torch.stack([
            torch.stack([random_stochastic(gen, seq_len, seq_len, concentration) for _ in range(heads)])
            for _ in range(samples)
        ])
        values = torch.stack([
            torch.stack([random_matrix(gen, seq_len, d_model) for _ in range(heads)])
            for _ in range(samples)
        ])
        return maps, values

    return make


@pytest.fixture
def tiny_teacher_cfg():
    return TinyTransformerConfig(vocab=8, d_model=12, h=3, d=4, layers=2, max_seq=8)


@pytest.fixture
def tiny_student_cfg():
    return TinyTransformerConfig(vocab=8, d_model=8, h=2, d=4, layers=2, max_seq=8)


@pytest.fixture
def random_dump(tmp_path):
    out = tmp_path / "dump"
    make_random_dump(out, layers=2, heads=4, seq_len=8, d_model=16, seed=0, samples=3)
    return out


@pytest.fixture
def run_configs(tmp_path):
    """Teacher and distill configs small enough to train in a second or two."""
    teacher = {
        "model": {"vocab": 8, "d_model": 12, "h": 3, "d": 4, "layers": 2, "max_seq": 8},
        "task": {"kind": "copy", "size": 64, "val_size": 16, "seq_len": 8, "seed": 0},
        "steps": 6,
        "lr": 1e-2,
        "batch_size": 4,
        "seed": 0,
        "val_every": 3,
        "log_every": 3,
    }
    distill = {
        "student": {"vocab": 8, "d_model": 8, "h": 2, "d": 4, "layers": 2, "max_seq": 8},
        "distill": {"beta": 2.0, "attn_temperature": 2.0, "logit_kd_weight": 1.0, "alpha_every": 2},
        "steps": 5,
        "lr": 1e-2,
        "batch_size": 4,
        "seed": 0,
        "val_every": 2,
        "log_every": 5,
    }
    teacher_path = tmp_path / "teacher.json"
    distill_path = tmp_path / "distill.json"
    teacher_path.write_text(json.dumps(teacher))
    distill_path.write_text(json.dumps(distill))
    return teacher_path, distill_path
