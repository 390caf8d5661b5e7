import pytest
import torch

from backend.services.attention import (
    AttentionParams,
    attention_logits,
    attention_maps,
    concat_forward,
    head_values,
    mha_forward,
)
from shared.utils.errors import DomainError, ShapeError
from shared.utils.numkernel import DTYPE, numerical_rank, random_matrix, row_entropy


def random_params(rng, h, d_model, scale=None):
    scale = scale if scale is not None else d_model ** -0.5
    w = [random_matrix(rng, d_model, d_model, scale) for _ in range(4)]
    return AttentionParams(h=h, w_q=w[0], w_k=w[1], w_v=w[2], w_o=w[3])


def test_zero_input_gives_uniform_maps(rng):
    params = random_params(rng, 2, 8)
    maps = attention_maps(torch.zeros(5, 8, dtype=DTYPE), params)
    assert torch.allclose(maps, torch.full((2, 5, 5), 0.2, dtype=DTYPE), rtol=0, atol=1e-15)


def test_single_token_map_is_one(rng):
    maps = attention_maps(random_matrix(rng, 1, 8), random_params(rng, 4, 8))
    assert maps.tolist() == [[[1.0]]] * 4


def test_maps_are_row_stochastic(rng):
    maps = attention_maps(random_matrix(rng, 7, 12), random_params(rng, 3, 12, scale=1.0), causal=True)
    assert float((maps.sum(dim=-1) - 1).abs().max()) <= 1e-12
    assert bool((maps >= 0).all())


def test_higher_temperature_never_lowers_entropy(rng):
    x, params = random_matrix(rng, 6, 8), random_params(rng, 2, 8, scale=1.0)
    cold = row_entropy(attention_maps(x, params, temperature=1.0))
    warm = row_entropy(attention_maps(x, params, temperature=2.0))
    assert bool((warm >= cold - 1e-12).all())


def test_zero_value_projection_gives_zero_head_values(rng):
    params = random_params(rng, 2, 8)
    params = AttentionParams(h=2, w_q=params.w_q, w_k=params.w_k, w_v=torch.zeros(8, 8, dtype=DTYPE), w_o=params.w_o)
    assert bool((head_values(random_matrix(rng, 4, 8), params) == 0).all())


def test_single_head_identity_projections_pass_input_through(rng):
    eye = torch.eye(4, dtype=DTYPE)
    x = random_matrix(rng, 5, 4)
    params = AttentionParams(h=1, w_q=eye, w_k=eye, w_v=eye, w_o=eye)
    assert torch.equal(head_values(x, params)[0], x)


def test_expanded_form_matches_concat_form(rng):
    x, params = random_matrix(rng, 6, 12), random_params(rng, 3, 12)
    for causal in (False, True):
        expanded, _ = mha_forward(x, params, causal)
        concat = concat_forward(x, params, causal)
        assert float((expanded - concat).norm() / concat.norm()) <= 1e-10


def test_sharp_identity_map_returns_head_values(rng):
    # Logits 50 on the diagonal and 0 elsewhere: the map is the identity to ~1e-22.
    x = 10.0 * torch.eye(4, dtype=DTYPE)
    eye = torch.eye(4, dtype=DTYPE)
    params = AttentionParams(h=1, w_q=eye, w_k=eye, w_v=random_matrix(rng, 4, 4), w_o=random_matrix(rng, 4, 4))
    out, bundle = mha_forward(x, params)
    assert torch.allclose(out, bundle.head_values[0], rtol=0, atol=1e-9)


def test_causal_output_ignores_future_tokens(rng):
    params = random_params(rng, 2, 8)
    x = random_matrix(rng, 5, 8)
    perturbed = x.clone()
    perturbed[1:] += random_matrix(rng, 4, 8)
    out, bundle = mha_forward(x, params, causal=True)
    out_p, _ = mha_forward(perturbed, params, causal=True)
    assert torch.allclose(out[0], out_p[0], rtol=0, atol=1e-15)
    assert bool((torch.triu(bundle.maps, diagonal=1) == 0).all())


def test_logit_rank_is_bounded_by_head_width(rng):
    logits = attention_logits(random_matrix(rng, 10, 4), random_params(rng, 2, 4))
    for head in logits:
        assert numerical_rank(head) <= 2


def test_bundle_retempering_matches_direct_maps(rng):
    x, params = random_matrix(rng, 6, 8), random_params(rng, 2, 8, scale=1.0)
    _, bundle = mha_forward(x, params, causal=True)
    hot = bundle.tempered(2.0)
    assert hot.temperature_used == 2.0
    assert torch.allclose(hot.maps, attention_maps(x, params, causal=True, temperature=2.0), rtol=0, atol=1e-15)
    assert bundle.tempered(1.0) is bundle


def test_bundle_without_logits_cannot_retemper(rng):
    _, bundle = mha_forward(random_matrix(rng, 3, 4), random_params(rng, 2, 4))
    stored = bundle.detach()
    object.__setattr__(stored, "logits", None)
    with pytest.raises(DomainError):
        stored.tempered(2.0)


def test_batched_input(rng):
    params = random_params(rng, 2, 8)
    x = torch.stack([random_matrix(rng, 5, 8) for _ in range(3)])
    out, bundle = mha_forward(x, params)
    assert tuple(out.shape) == (3, 5, 8)
    assert tuple(bundle.maps.shape) == (3, 2, 5, 5)
    assert tuple(bundle.head_values.shape) == (3, 2, 5, 8)
    single, _ = mha_forward(x[1], params)
    assert torch.allclose(out[1], single, rtol=0, atol=1e-12)


def test_params_shape_checks(rng):
    w = random_matrix(rng, 6, 6)
    with pytest.raises(ShapeError):
        AttentionParams(h=4, w_q=w, w_k=w, w_v=w, w_o=w)
    with pytest.raises(ShapeError):
        AttentionParams(h=2, w_q=w, w_k=w, w_v=random_matrix(rng, 6, 4), w_o=w)


def test_input_width_mismatch(rng):
    with pytest.raises(ShapeError):
        mha_forward(random_matrix(rng, 3, 5), random_params(rng, 2, 8))
