"""Embedding prior networks.

``PNetS1`` turns the two LA-CLIP image embeddings into the embedding prior
``Z``. Each embedding coordinate becomes one token (``x_j * u + p_j``); label
tokens query feature tokens through stacked cross-attention layers and the
flattened query tokens are projected to ``C`` dims.

``PNetS2`` maps a raw image straight to the conditioning vector ``x_s2`` of
the same width ``C``.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import ModelConfig


def multihead_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    bias: Optional[Tensor] = None,
    key_mask: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the second-to-last axis.

    ``q`` is (..., Lq, D), ``k``/``v`` are (..., Lk, D). Returns the merged
    head outputs (..., Lq, D) and attention weights (..., heads, Lq, Lk).
    ``key_mask`` is True for keys that may be attended.
    """
    *lead, lq, d = q.shape
    lk = k.shape[-2]
    dh = d // heads
    qh = q.reshape(*lead, lq, heads, dh).transpose(-3, -2)
    kh = k.reshape(*lead, lk, heads, dh).transpose(-3, -2)
    vh = v.reshape(*lead, lk, heads, dh).transpose(-3, -2)
    scores = qh @ kh.transpose(-1, -2) / dh**0.5
    if bias is not None:
        scores = scores + bias
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.unsqueeze(-2).unsqueeze(-3), float("-inf"))
    attn = scores.softmax(dim=-1)
    out = (attn @ vh).transpose(-3, -2).reshape(*lead, lq, d)
    return out, attn


class CrossAttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.last_attn: Optional[Tensor] = None

    def forward(self, query: Tensor, context: Tensor) -> Tensor:
        out, attn = multihead_attention(self.w_q(query), self.w_k(context), self.w_v(context), self.heads)
        self.last_attn = attn.detach()
        x = query + self.w_o(out)
        return x + self.mlp(self.norm(x))


class CoordinateTokens(nn.Module):
    """Lift a D-vector to D tokens: token_j = x_j * u + p_j."""

    def __init__(self, n: int, dim: int):
        super().__init__()
        self.u = nn.Parameter(torch.randn(dim) * 0.5)
        self.p = nn.Parameter(torch.randn(n, dim) * 0.5)

    def forward(self, x: Tensor) -> Tensor:
        return x.unsqueeze(-1) * self.u + self.p


class PNetS1(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d_e, dim = cfg.embed_dim, cfg.pnet_s1_token_dim
        self.embed_dim, self.out_dim = d_e, cfg.epd_dim
        self.query_tokens = CoordinateTokens(d_e, dim)
        self.context_tokens = CoordinateTokens(d_e, dim)
        self.layers = nn.ModuleList(CrossAttentionLayer(dim, cfg.pnet_s1_heads) for _ in range(cfg.pnet_s1_layers))
        self.proj = nn.Linear(d_e * dim, cfg.epd_dim)

    def forward(self, feat: Tensor, label_pred: Tensor) -> Tensor:
        if feat.shape[-1] != self.embed_dim or label_pred.shape[-1] != self.embed_dim:
            raise ValueError(
                f"pnet_s1 expects {self.embed_dim}-dim embeddings, got {feat.shape[-1]} and {label_pred.shape[-1]}"
            )
        q = self.query_tokens(label_pred)
        ctx = self.context_tokens(feat)
        for layer in self.layers:
            q = layer(q, ctx)
        return self.proj(q.flatten(-2))


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, 1, 1)
        self.conv2 = nn.Conv2d(width, width, 3, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(F.gelu(self.conv1(x)))


class PNetS2(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.pnet_s2_width
        self.image_size = cfg.image_size
        self.stem = nn.Conv2d(3, w, 3, 2, 1)
        self.blocks = nn.Sequential(*(ResidualBlock(w) for _ in range(cfg.pnet_s2_blocks)))
        self.fc = nn.Linear(w, cfg.epd_dim)

    def forward(self, images: Tensor) -> Tensor:
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} images, got {tuple(images.shape[-2:])}")
        h = self.blocks(F.gelu(self.stem(images)))
        return self.fc(h.mean(dim=(2, 3)))


def check_prior_dims(s1: PNetS1, s2: PNetS2) -> None:
    if s1.proj.out_features != s2.fc.out_features:
        raise ValueError(
            f"prior widths differ: pnet_s1 -> {s1.proj.out_features}, pnet_s2 -> {s2.fc.out_features}"
        )
