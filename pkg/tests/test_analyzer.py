import json

import pytest
import torch

from backend.services.analyzer import (
    HISTOGRAM_BINS,
    adjacent_pairs,
    analyze_dump,
    analyze_layer,
    make_random_dump,
    squeeze_dump,
)
from backend.services.squeeze import MergeStrategy
from shared.utils import storage
from shared.utils.errors import DomainError
from shared.utils.numkernel import make_rng, random_matrix, random_stochastic


def test_adjacent_pairs():
    assert adjacent_pairs(4) == [(0, 1), (2, 3)]
    assert adjacent_pairs(5) == [(0, 1), (2, 3)]
    assert adjacent_pairs(1) == []


def test_identical_heads_are_fully_similar():
    rng = make_rng(0)
    maps = torch.stack([torch.stack([random_stochastic(rng, 4, 4)] * 3) for _ in range(2)])
    values = torch.stack([torch.stack([random_matrix(rng, 4, 5) for _ in range(3)]) for _ in range(2)])
    layer = analyze_layer(0, maps, values)
    assert layer.mean_off_diagonal == pytest.approx(1.0, abs=1e-12)
    # identical maps merge at 0.5, one pair per sample
    assert layer.alpha_count == 2
    assert layer.alpha_histogram.counts[HISTOGRAM_BINS // 2] == 2


def test_single_head_layer():
    rng = make_rng(1)
    layer = analyze_layer(3, random_stochastic(rng, 4, 4)[None, None], random_matrix(rng, 4, 2)[None, None])
    assert layer.similarity == [[1.0]]
    assert layer.mean_off_diagonal is None
    assert layer.alpha_count == 0


def test_report_of_random_dump(random_dump):
    report = analyze_dump(random_dump)
    assert (report.heads, report.samples, report.seq_len) == (4, 3, 8)
    assert len(report.layers) == 2
    for layer in report.layers:
        assert len(layer.similarity) == 4
        assert layer.mean_off_diagonal < 1.0
        assert sum(layer.alpha_histogram.counts) == layer.alpha_count == 3 * 2
        assert len(layer.alpha_histogram.edges) == HISTOGRAM_BINS + 1


def test_random_dump_is_seeded(tmp_path):
    make_random_dump(tmp_path / "a", layers=1, heads=2, seq_len=4, d_model=8, seed=7)
    make_random_dump(tmp_path / "b", layers=1, heads=2, seq_len=4, d_model=8, seed=7)
    for name in ("layer0_maps.f32", "layer0_values.f32", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_random_dump_rejects_empty_dimensions(tmp_path):
    with pytest.raises(DomainError):
        make_random_dump(tmp_path / "x", heads=0)


@pytest.mark.parametrize("strategy", list(MergeStrategy))
def test_squeeze_to_same_head_count_is_byte_identical(random_dump, tmp_path, strategy):
    out = tmp_path / "same"
    squeeze_dump(random_dump, 4, out, strategy)
    for i in range(2):
        name = f"layer{i}_maps.f32"
        assert (out / name).read_bytes() == (random_dump / name).read_bytes()


def test_squeeze_dump_writes_rows_and_alphas(random_dump, tmp_path):
    out = tmp_path / "squeezed"
    manifest, payload = squeeze_dump(random_dump, 2, out, MergeStrategy.SHD)
    assert (manifest.heads, manifest.layers, manifest.samples) == (2, 2, 3)
    _, maps, values = storage.read_dump(out)
    assert float((maps[0].sum(dim=-1) - 1).abs().max()) <= 1e-6
    _, _, source_values = storage.read_dump(random_dump)
    assert torch.allclose(values[1][:, 0], source_values[1][:, 0] + source_values[1][:, 1], atol=1e-5)
    written = json.loads((out / "alphas.json").read_text())
    assert written == payload
    assert written["layers"][0]["groups"] == [[0, 1], [2, 3]]
    assert all(0.0 <= a <= 1.0 for layer in written["layers"] for group in layer["alphas"] for row in group for a in row)


def test_squeeze_dump_constant_and_hard_select(random_dump, tmp_path):
    _, payload = squeeze_dump(random_dump, 2, tmp_path / "c", MergeStrategy.CONSTANT_HALF)
    assert all(a == 0.5 for layer in payload["layers"] for group in layer["alphas"] for row in group for a in row)
    _, payload = squeeze_dump(random_dump, 2, tmp_path / "h", MergeStrategy.HARD_SELECT, seed=3)
    for layer in payload["layers"]:
        assert all(s in g for s, g in zip(layer["selected"], layer["groups"]))


def test_squeeze_dump_target_range(random_dump, tmp_path):
    with pytest.raises(DomainError):
        squeeze_dump(random_dump, 5, tmp_path / "bad")
    with pytest.raises(DomainError):
        squeeze_dump(random_dump, 0, tmp_path / "bad")
