"""Multi-head self-attention that exposes per-head maps and value terms.

Weights act on the right (``x @ W``). W_q, W_k and W_v are d_model x d_model
and hold h column blocks of width d; W_o is (h*d) x d_model and holds h row
blocks of height d. With X_i = (x W_v[:, block i]) W_o[block i, :] the layer
output is sum_i A_i X_i.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import torch

from shared.utils.errors import DomainError, ShapeError, shape_of
from shared.utils.numkernel import as_matrix, causal_mask, ensure_finite, softmax_rows


@dataclass(frozen=True)
class AttentionParams:
    """Projection weights of one attention layer (no biases)."""

    h: int
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor

    def __post_init__(self):
        d_model = self.w_q.shape[0]
        if self.h < 1 or d_model % self.h != 0:
            raise ShapeError(f"d_model={d_model} is not a multiple of h={self.h}")
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(self, name)
            if tuple(w.shape) != (d_model, d_model):
                raise ShapeError(f"{name} must be {d_model}x{d_model}, got {shape_of(w)}")
        if tuple(self.w_o.shape) != (d_model, d_model):
            raise ShapeError(f"w_o must be {d_model}x{d_model} (h*d x d_model), got {shape_of(self.w_o)}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d(self) -> int:
        return self.d_model // self.h

    def out_blocks(self) -> torch.Tensor:
        """W_o as h stacked d x d_model blocks."""
        return self.w_o.reshape(self.h, self.d, self.d_model)


@dataclass(frozen=True)
class AttentionBundle:
    """Per-layer attention artifacts.

    ``maps`` is (..., h, N, N), ``head_values`` (..., h, N, d_model) and
    ``logits`` the cached pre-softmax scores QW_i^Q(KW_i^K)^T / sqrt(d), absent
    for bundles read back from a dump.
    """

    maps: torch.Tensor
    head_values: torch.Tensor
    logits: Optional[torch.Tensor] = None
    causal: bool = False
    temperature_used: float = 1.0

    @property
    def seq_len(self) -> int:
        return self.maps.shape[-1]

    @property
    def num_heads(self) -> int:
        return self.maps.shape[-3]

    def tempered(self, temperature: float) -> "AttentionBundle":
        """Same bundle with maps recomputed from the cached logits at ``temperature``."""
        if temperature == self.temperature_used:
            return self
        if self.logits is None:
            raise DomainError("bundle has no cached logits to re-temper")
        mask = causal_mask(self.seq_len) if self.causal else None
        maps = softmax_rows(self.logits, mask, temperature)
        return replace(self, maps=maps, temperature_used=float(temperature))

    def detach(self) -> "AttentionBundle":
        return replace(
            self,
            maps=self.maps.detach(),
            head_values=self.head_values.detach(),
            logits=None if self.logits is None else self.logits.detach(),
        )


def _split_heads(y: torch.Tensor, h: int) -> torch.Tensor:
    # (..., N, h*d) -> (..., h, N, d)
    return y.reshape(*y.shape[:-1], h, y.shape[-1] // h).transpose(-3, -2)


def _check_input(x: torch.Tensor, params: AttentionParams) -> torch.Tensor:
    x = as_matrix(x)
    if x.shape[-1] != params.d_model:
        raise ShapeError(f"input width {x.shape[-1]} does not match d_model={params.d_model}")
    return ensure_finite(x, "attention input")


def attention_logits(x: torch.Tensor, params: AttentionParams) -> torch.Tensor:
    x = _check_input(x, params)
    q = _split_heads(x @ params.w_q, params.h)
    k = _split_heads(x @ params.w_k, params.h)
    return q @ k.transpose(-2, -1) / math.sqrt(params.d)


def attention_maps(
    x: torch.Tensor,
    params: AttentionParams,
    causal: bool = False,
    temperature: float = 1.0,
) -> torch.Tensor:
    """h row-stochastic N x N maps, stacked on dim -3."""
    logits = attention_logits(x, params)
    mask = causal_mask(logits.shape[-1]) if causal else None
    return softmax_rows(logits, mask, temperature)


def head_values(x: torch.Tensor, params: AttentionParams) -> torch.Tensor:
    """X_i = (x W_i^V) W_i^O for every head, stacked on dim -3."""
    x = _check_input(x, params)
    v = _split_heads(x @ params.w_v, params.h)
    return v @ params.out_blocks()


def mha_forward(
    x: torch.Tensor,
    params: AttentionParams,
    causal: bool = False,
) -> Tuple[torch.Tensor, AttentionBundle]:
    """Forward pass at temperature 1 in the expanded form sum_i A_i X_i."""
    logits = attention_logits(x, params)
    mask = causal_mask(logits.shape[-1]) if causal else None
    maps = softmax_rows(logits, mask, 1.0)
    values = head_values(x, params)
    output = ensure_finite((maps @ values).sum(dim=-3), "mha_forward")
    bundle = AttentionBundle(maps=maps, head_values=values, logits=logits, causal=causal)
    return output, bundle


def concat_forward(x: torch.Tensor, params: AttentionParams, causal: bool = False) -> torch.Tensor:
    """Concat(Head_1, ..., Head_h) W^O, the un-expanded form of mha_forward."""
    maps = attention_maps(x, params, causal)
    v = _split_heads(_check_input(x, params) @ params.w_v, params.h)
    heads = (maps @ v).transpose(-3, -2)
    concat = heads.reshape(*heads.shape[:-2], params.h * params.d)
    return concat @ params.w_o
