"""Label-aware CLIP stand-in.

A small image encoder with two heads (feature embedding and predicted label
embedding) and a closed-vocabulary text encoder for captions and label names.
Both sides are aligned with a symmetric InfoNCE objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import CAPTION_TEMPLATE, CLASS_NAMES, ModelConfig

PAD = "<pad>"
VOCAB: tuple[str, ...] = (PAD,) + tuple(
    dict.fromkeys(CAPTION_TEMPLATE.replace("{label}", "").split() + list(CLASS_NAMES))
)
MAX_TOKENS = 16


class TokenizerError(ValueError):
    pass


def tokenize(text: Union[str, Sequence[str]]) -> list[int]:
    words = text.lower().split() if isinstance(text, str) else [w.lower() for w in text]
    if not words:
        raise TokenizerError("empty text")
    if len(words) > MAX_TOKENS:
        raise TokenizerError(f"text longer than {MAX_TOKENS} tokens")
    ids = []
    for w in words:
        try:
            ids.append(VOCAB.index(w))
        except ValueError:
            raise TokenizerError(f"out-of-vocabulary token: {w!r}") from None
    return ids


def pad_tokens(batch: Sequence[Sequence[int]]) -> Tensor:
    out = torch.zeros(len(batch), max(len(b) for b in batch), dtype=torch.long)
    for i, b in enumerate(batch):
        out[i, : len(b)] = torch.tensor(b)
    return out


@dataclass
class DualImageEmbedding:
    feat: Tensor  # f_c^I, (B, D_e)
    label_pred: Tensor  # f_l^I, (B, D_e)


class ConvBlock(nn.Module):
    """Strided conv followed by a residual 3x3 conv."""

    def __init__(self, cin: int, cout: int, stride: int = 2):
        super().__init__()
        self.down = nn.Conv2d(cin, cout, 3, stride, 1)
        self.conv = nn.Conv2d(cout, cout, 3, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        x = F.gelu(self.down(x))
        return x + F.gelu(self.conv(x))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.image_size = cfg.image_size
        w = cfg.clip_width
        blocks, cin = [], 3
        for i in range(cfg.clip_depth):
            cout = w * min(2**i, 4)
            # stop halving once the map is 2x2
            stride = 2 if cfg.image_size // 2 ** (i + 1) >= 2 else 1
            blocks.append(ConvBlock(cin, cout, stride))
            cin = cout
        self.backbone = nn.Sequential(*blocks)
        self.feat_head = nn.Linear(cin, cfg.embed_dim)
        self.label_head = nn.Sequential(nn.Linear(cin, cin), nn.GELU(), nn.Linear(cin, cfg.embed_dim))

    def forward(self, images: Tensor) -> DualImageEmbedding:
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} images, got {tuple(images.shape[-2:])}")
        h = self.backbone(images).mean(dim=(2, 3))
        return DualImageEmbedding(
            F.normalize(self.feat_head(h), dim=-1),
            F.normalize(self.label_head(h), dim=-1),
        )


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.text_width
        self.tok = nn.Embedding(len(VOCAB), w, padding_idx=0)
        self.pos = nn.Parameter(torch.randn(MAX_TOKENS, w) * 0.02)
        self.mlp = nn.Sequential(nn.Linear(w, 2 * w), nn.GELU(), nn.Linear(2 * w, w))
        self.heads = nn.ModuleDict({"caption": nn.Linear(w, cfg.embed_dim), "label": nn.Linear(w, cfg.embed_dim)})

    def forward(self, tokens: Tensor, kind: str) -> Tensor:
        if kind not in self.heads:
            raise ValueError(f"kind must be 'caption' or 'label', got {kind!r}")
        mask = (tokens != 0).unsqueeze(-1).to(self.pos.dtype)
        x = self.tok(tokens) + self.pos[: tokens.shape[1]]
        x = x + self.mlp(x)
        pooled = (x * mask).sum(1) / mask.sum(1).clamp_min(1)
        return F.normalize(self.heads[kind](pooled), dim=-1)


class LAClip(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.image = ImageEncoder(cfg)
        self.text = TextEncoder(cfg)
        # learnable inverse temperature, stored in log space
        self.log_scale = nn.Parameter(torch.tensor(math.log(1.0 / cfg.temperature_init)))

    @property
    def temperature(self) -> Tensor:
        return 1.0 / self.log_scale.clamp(max=math.log(100.0)).exp()

    def encode_image(self, images: Tensor) -> DualImageEmbedding:
        return self.image(images)

    def encode_text(self, texts: Sequence[Union[str, Sequence[str]]], kind: str) -> Tensor:
        tokens = pad_tokens([tokenize(t) for t in texts]).to(self.pos_device)
        return self.text(tokens, kind)

    def encode_labels(self, labels: Tensor) -> Tensor:
        names = [self.cfg.class_names[int(i)] for i in labels]
        return self.encode_text(names, "label")

    def encode_captions(self, captions: Sequence[str]) -> Tensor:
        return self.encode_text(captions, "caption")

    @property
    def pos_device(self) -> torch.device:
        return self.log_scale.device

    def loss(self, images: Tensor, captions: Sequence[str], labels: Tensor) -> tuple[Tensor, DualImageEmbedding]:
        emb = self.encode_image(images)
        cap = self.encode_captions(captions)
        lab = self.encode_labels(labels)
        return alignment_loss(emb.feat, cap, emb.label_pred, lab, self.temperature), emb


def _info_nce(a: Tensor, b: Tensor, temperature: Tensor | float) -> Tensor:
    logits = a @ b.t() / temperature
    target = torch.arange(a.shape[0], device=a.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.t(), target))


def alignment_loss(
    feat: Tensor,
    caption: Tensor,
    label_pred: Tensor,
    label_text: Tensor,
    temperature: Tensor | float,
) -> Tensor:
    """Symmetric InfoNCE over (feature, caption) plus (label_pred, label text).

    Each term averages the image->text and text->image cross entropies, so a
    batch of N identical embeddings scores ln N per term.
    """
    n = feat.shape[0]
    if n < 2:
        raise ValueError("alignment_loss needs a batch of at least 2")
    if not (caption.shape[0] == label_pred.shape[0] == label_text.shape[0] == n):
        raise ValueError("all embedding batches must have the same size")
    if float(torch.as_tensor(temperature).detach()) <= 0:
        raise ValueError("temperature must be > 0")
    return _info_nce(feat, caption, temperature) + _info_nce(label_pred, label_text, temperature)
