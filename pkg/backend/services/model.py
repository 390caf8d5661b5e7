"""Tiny pre-norm transformer used as teacher and student.

Learned absolute positions, bias-free attention built on ``attention.mha_forward``
so every layer exposes its maps and head values, a 4x MLP with tanh GELU, final
layer norm and an output head that is untied unless the config says otherwise.
"""

import math
from dataclasses import dataclass
from typing import List

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from shared.schemas.config import TinyTransformerConfig
from shared.utils.errors import DomainError, ShapeError, shape_of
from shared.utils.numkernel import DTYPE, ensure_finite

from .attention import AttentionBundle, AttentionParams, mha_forward

LN_EPS = 1e-5


def _param(*shape: int) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape, dtype=DTYPE))


class LayerNorm(nn.Module):
    def __init__(self, ndim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(ndim, dtype=DTYPE))
        self.bias = _param(ndim)

    def forward(self, x):
        return F.layer_norm(x, self.weight.shape, self.weight, self.bias, LN_EPS)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, h: int):
        super().__init__()
        self.h = h
        self.w_q = _param(d_model, d_model)
        self.w_k = _param(d_model, d_model)
        self.w_v = _param(d_model, d_model)
        self.w_o = _param(d_model, d_model)

    def params(self) -> AttentionParams:
        return AttentionParams(h=self.h, w_q=self.w_q, w_k=self.w_k, w_v=self.w_v, w_o=self.w_o)

    def forward(self, x, causal: bool):
        return mha_forward(x, self.params(), causal)


class MLP(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.w_fc = _param(d_model, 4 * d_model)
        self.b_fc = _param(4 * d_model)
        self.w_proj = _param(4 * d_model, d_model)
        self.b_proj = _param(d_model)

    def forward(self, x):
        return F.gelu(x @ self.w_fc + self.b_fc, approximate="tanh") @ self.w_proj + self.b_proj


class Block(nn.Module):
    def __init__(self, cfg: TinyTransformerConfig):
        super().__init__()
        self.ln_1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.h)
        self.ln_2 = LayerNorm(cfg.d_model)
        self.mlp = MLP(cfg.d_model)

    def forward(self, x, causal: bool):
        attn_out, bundle = self.attn(self.ln_1(x), causal)
        x = x + attn_out
        x = x + self.mlp(self.ln_2(x))
        return x, bundle


@dataclass
class ModelOutput:
    logits: torch.Tensor  # (B, N, vocab)
    bundles: List[AttentionBundle]  # one per layer
    features: List[torch.Tensor]  # residual stream after each block, (B, N, d_model)


class TinyTransformer(nn.Module):
    def __init__(self, cfg: TinyTransformerConfig):
        super().__init__()
        self.config = cfg
        self.tok_emb = _param(cfg.vocab, cfg.d_model)
        self.pos_emb = _param(cfg.max_seq, cfg.d_model)
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.layers)])
        self.ln_f = LayerNorm(cfg.d_model)
        self.w_head = None if cfg.tie_embeddings else _param(cfg.d_model, cfg.vocab)

    def forward(self, tokens: torch.Tensor) -> ModelOutput:
        if tokens.dim() != 2:
            raise ShapeError(f"tokens must be (batch, seq_len), got {shape_of(tokens)}")
        n = tokens.shape[1]
        if n > self.config.max_seq:
            raise DomainError(f"sequence length {n} exceeds max_seq={self.config.max_seq}")
        x = self.tok_emb[tokens] + self.pos_emb[:n]
        bundles, features = [], []
        for block in self.blocks:
            x, bundle = block(x, self.config.causal)
            bundles.append(bundle)
            features.append(x)
        head = self.tok_emb.T if self.w_head is None else self.w_head
        logits = ensure_finite(self.ln_f(x) @ head, "model forward")
        return ModelOutput(logits=logits, bundles=bundles, features=features)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_parameters(model: nn.Module, rng: np.random.Generator) -> nn.Module:
    """Scaled-normal init (std d_model^-1/2) from ``rng`` in parameter order.

    Layer-norm gains start at one and every bias at zero; neither draws from
    the generator.
    """
    std = 1.0 / math.sqrt(model.config.d_model)
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "weight":
                p.fill_(1.0)
            elif leaf == "bias" or leaf.startswith("b_"):
                p.zero_()
            else:
                p.copy_(torch.from_numpy(rng.standard_normal(tuple(p.shape))) * std)
    return model


def build_model(cfg: TinyTransformerConfig, rng: np.random.Generator) -> TinyTransformer:
    return init_parameters(TinyTransformer(cfg), rng)
