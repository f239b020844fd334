"""Label-restoration transformer.

Two parallel branches feed a multi-scale classifier:

* DTNet, a U-Net of EPD-modulated blocks. Each block modulates the map with
  the prior, runs channel attention (DMNet), modulates again and runs the
  gated conv unit (DGNet). Decoder-side outputs are tapped at every scale.
* DLNet, a pyramid of window cross-attention encoders in which downscaled
  landmark heatmaps query the image features of the same window.

Per scale the two outputs are concatenated, pooled to a small token grid,
projected to a shared width and processed by one transformer block before a
mean-pooled linear head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import ModelConfig
from .pnet import multihead_attention


def layer_norm_channels(x: Tensor, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the channel axis of a (B, C, H, W) map, no affine."""
    return F.layer_norm(x.permute(0, 2, 3, 1), x.shape[1:2], eps=eps).permute(0, 3, 1, 2)


def epd_modulate(feat: Tensor, z: Tensor, w1: nn.Linear, w2: nn.Linear) -> Tensor:
    """F' = (W1 Z) * LN(F) + W2 Z, with W1 Z and W2 Z broadcast over space."""
    if z.shape[-1] != w1.in_features:
        raise ValueError(f"EPD has dim {z.shape[-1]}, modulation expects {w1.in_features}")
    if feat.shape[1] != w1.out_features:
        raise ValueError(f"feature map has {feat.shape[1]} channels, modulation expects {w1.out_features}")
    scale = w1(z)[:, :, None, None]
    shift = w2(z)[:, :, None, None]
    return scale * layer_norm_channels(feat) + shift


class EPDModulation(nn.Module):
    def __init__(self, epd_dim: int, channels: int):
        super().__init__()
        self.w1 = nn.Linear(epd_dim, channels)
        self.w2 = nn.Linear(epd_dim, channels)

    def forward(self, feat: Tensor, z: Tensor) -> Tensor:
        return epd_modulate(feat, z, self.w1, self.w2)


class DMNet(nn.Module):
    """Channel attention: every channel attends over all C'' channels.

    The stored map ``attn[i, j]`` is ``softmax_j(q_i . k_j / alpha)`` where
    q_i, k_j are length-HW channel rows; each row sums to 1 and is contracted
    with the value rows. This is the transpose of the ``softmax(K Q)`` layout
    with the softmax taken over the axis that meets V.
    """

    def __init__(self, channels: int, alpha_init: float):
        super().__init__()
        self.qkv = nn.Conv2d(channels, 3 * channels, 1, bias=False)
        self.proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.log_alpha = nn.Parameter(torch.tensor(math.log(alpha_init)))
        self.last_attn: Optional[Tensor] = None

    @property
    def alpha(self) -> Tensor:
        return self.log_alpha.exp()

    def forward(self, feat_mod: Tensor, feat: Tensor) -> Tensor:
        if feat_mod.shape != feat.shape:
            raise ValueError(f"shape mismatch: {tuple(feat_mod.shape)} vs {tuple(feat.shape)}")
        b, c, h, w = feat.shape
        q, k, v = self.qkv(feat_mod).reshape(b, 3, c, h * w).unbind(1)
        attn = (q @ k.transpose(-1, -2) / self.alpha).softmax(dim=-1)
        self.last_attn = attn.detach()
        out = (attn @ v).reshape(b, c, h, w)
        return self.proj(out) + feat


class DGNet(nn.Module):
    """Gated conv unit: GELU(Wd1 Wc1 F') * (Wd2 Wc2 F') + F."""

    def __init__(self, channels: int):
        super().__init__()
        self.c1 = nn.Conv2d(channels, channels, 1, bias=False)
        self.d1 = nn.Conv2d(channels, channels, 3, 1, 1, groups=channels, bias=False)
        self.c2 = nn.Conv2d(channels, channels, 1, bias=False)
        self.d2 = nn.Conv2d(channels, channels, 3, 1, 1, groups=channels, bias=False)

    def forward(self, feat_mod: Tensor, feat: Tensor) -> Tensor:
        if feat_mod.shape != feat.shape:
            raise ValueError(f"shape mismatch: {tuple(feat_mod.shape)} vs {tuple(feat.shape)}")
        gate = F.gelu(self.d1(self.c1(feat_mod)))
        return gate * self.d2(self.c2(feat_mod)) + feat


class DTBlock(nn.Module):
    def __init__(self, channels: int, epd_dim: int, spatial: int):
        super().__init__()
        self.mod_attn = EPDModulation(epd_dim, channels)
        self.dmnet = DMNet(channels, alpha_init=math.sqrt(spatial * spatial))
        self.mod_gate = EPDModulation(epd_dim, channels)
        self.dgnet = DGNet(channels)

    def forward(self, feat: Tensor, z: Tensor) -> Tensor:
        feat = self.dmnet(self.mod_attn(feat, z), feat)
        return self.dgnet(self.mod_gate(feat, z), feat)


class DTNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch, sizes = cfg.channels, cfg.scale_sizes()
        n = len(ch)
        self.stem = nn.Conv2d(3, ch[0], 3, 1, 1)
        self.enc = nn.ModuleList(DTBlock(ch[s], cfg.epd_dim, sizes[s]) for s in range(n - 1))
        self.down = nn.ModuleList(nn.Conv2d(ch[s], ch[s + 1], 3, 2, 1) for s in range(n - 1))
        self.bottleneck = DTBlock(ch[-1], cfg.epd_dim, sizes[-1])
        self.up = nn.ModuleList(nn.Conv2d(ch[s + 1], ch[s], 1) for s in range(n - 1))
        self.merge = nn.ModuleList(nn.Conv2d(2 * ch[s], ch[s], 1) for s in range(n - 1))
        self.dec = nn.ModuleList(DTBlock(ch[s], cfg.epd_dim, sizes[s]) for s in range(n - 1))
        self.last_shapes: dict[str, list[tuple[int, int]]] = {}

    def forward(self, images: Tensor, z: Tensor) -> list[Tensor]:
        """Decoder-side feature maps, finest scale first."""
        x = self.stem(images)
        skips = []
        for block, down in zip(self.enc, self.down):
            x = block(x, z)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x, z)
        taps = [x]
        for s in reversed(range(len(skips))):
            x = self.up[s](F.interpolate(x, size=skips[s].shape[-2:], mode="nearest"))
            x = self.merge[s](torch.cat([x, skips[s]], dim=1))
            x = self.dec[s](x, z)
            taps.append(x)
        taps.reverse()
        self.last_shapes = {
            "enc": [tuple(t.shape[-2:]) for t in skips] + [tuple(taps[-1].shape[-2:])],
            "dec": [tuple(t.shape[-2:]) for t in taps],
        }
        return taps


@dataclass
class WindowSet:
    """Non-overlapping windows of a (B, D, H, W) map.

    ``windows`` is (B, nW, M, D) with M = wh * ww; ``valid`` marks window
    positions that come from the map rather than zero padding.
    """

    windows: Tensor
    window: tuple[int, int]
    grid: tuple[int, int]
    pad: tuple[int, int]
    size: tuple[int, int]
    valid: Tensor

    @property
    def m(self) -> int:
        return self.window[0] * self.window[1]


def window_partition(x: Tensor, window: int | tuple[int, int]) -> WindowSet:
    wh, ww = (window, window) if isinstance(window, int) else window
    b, d, h, w = x.shape
    wh, ww = min(wh, h), min(ww, w)
    ph, pw = (-h) % wh, (-w) % ww
    valid = torch.ones(1, 1, h, w, dtype=torch.bool, device=x.device)
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
        valid = F.pad(valid, (0, pw, 0, ph), value=False)
    gh, gw = (h + ph) // wh, (w + pw) // ww

    def split(t: Tensor) -> Tensor:
        n, c = t.shape[:2]
        t = t.reshape(n, c, gh, wh, gw, ww).permute(0, 2, 4, 3, 5, 1)
        return t.reshape(n, gh * gw, wh * ww, c)

    return WindowSet(split(x), (wh, ww), (gh, gw), (ph, pw), (h, w), split(valid)[0, :, :, 0])


def window_reverse(ws: WindowSet, windows: Optional[Tensor] = None) -> Tensor:
    t = ws.windows if windows is None else windows
    b, _, _, d = t.shape
    (gh, gw), (wh, ww), (h, w) = ws.grid, ws.window, ws.size
    t = t.reshape(b, gh, gw, wh, ww, d).permute(0, 5, 1, 3, 2, 4).reshape(b, d, gh * wh, gw * ww)
    return t[:, :, :h, :w]


def cross_window_attention(
    x_fl: Tensor,
    x_ll: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    b_o: Optional[Tensor] = None,
    pos_bias: Optional[Tensor] = None,
    heads: int = 1,
    key_mask: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor]:
    """Landmark windows query image windows.

    ``x_fl`` and ``x_ll`` are (B, nW, M, D); weights are D x D in ``x @ w``
    layout; ``pos_bias`` is (heads, M, M). Returns O (B, nW, M, D) after the
    output projection, and the per-window attention (B, nW, heads, M, M).
    """
    if x_fl.shape[-1] != x_ll.shape[-1]:
        raise ValueError(f"landmark channels {x_fl.shape[-1]} != window dim {x_ll.shape[-1]}")
    if x_fl.shape[-2] != x_ll.shape[-2]:
        raise ValueError(f"landmark tokens per window {x_fl.shape[-2]} != M = {x_ll.shape[-2]}")
    if x_fl.shape[:-2] != x_ll.shape[:-2]:
        raise ValueError("landmark and image window grids differ")
    out, attn = multihead_attention(x_fl @ w_q, x_ll @ w_k, x_ll @ w_v, heads, pos_bias, key_mask)
    out = out @ w_o
    if b_o is not None:
        out = out + b_o
    return out, attn


class MHCAEncoder(nn.Module):
    """X' = MHCA(X_ll) + X_ll ; X'' = MLP(LN(X')) + X'."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.heads, self.window = heads, window
        m = window * window
        s = dim**-0.5
        self.w_q = nn.Parameter(torch.randn(dim, dim) * s)
        self.w_k = nn.Parameter(torch.randn(dim, dim) * s)
        self.w_v = nn.Parameter(torch.randn(dim, dim) * s)
        self.w_o = nn.Parameter(torch.randn(dim, dim) * s)
        self.b_o = nn.Parameter(torch.zeros(dim))
        self.pos_bias = nn.Parameter(torch.zeros(heads, m, m))
        self.norm = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.last_attn: Optional[Tensor] = None

    def mhca(self, x_ll: Tensor, x_fl: Tensor) -> Tensor:
        """Residual cross-window attention on (B, D, H, W) maps."""
        if x_ll.shape != x_fl.shape:
            raise ValueError(f"landmark map {tuple(x_fl.shape)} does not match image map {tuple(x_ll.shape)}")
        ll = window_partition(x_ll, self.window)
        fl = window_partition(x_fl, self.window)
        bias = self.pos_bias[:, : ll.m, : ll.m]
        key_mask = ll.valid if (ll.pad[0] or ll.pad[1]) else None
        out, attn = cross_window_attention(
            fl.windows, ll.windows, self.w_q, self.w_k, self.w_v, self.w_o, self.b_o, bias, self.heads, key_mask
        )
        self.last_attn = attn.detach()
        return window_reverse(ll, out) + x_ll

    def ffn(self, x: Tensor) -> Tensor:
        t = x.permute(0, 2, 3, 1)
        t = self.mlp(self.norm(t)) + t
        return t.permute(0, 3, 1, 2)

    def forward(self, x_ll: Tensor, x_fl: Tensor) -> Tensor:
        return self.ffn(self.mhca(x_ll, x_fl))


class DLNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        self.sizes = cfg.scale_sizes()
        self.stem = nn.Conv2d(3, ch[0], 3, 1, 1)
        self.down = nn.ModuleList(nn.Conv2d(ch[s], ch[s + 1], 3, 2, 1) for s in range(len(ch) - 1))
        self.landmark_proj = nn.ModuleList(nn.Conv2d(cfg.n_landmarks, c, 1) for c in ch)
        self.encoders = nn.ModuleList(MHCAEncoder(c, cfg.dlnet_heads, cfg.window_size) for c in ch)

    def forward(self, images: Tensor, landmarks: Tensor) -> list[Tensor]:
        x = self.stem(images)
        outs = []
        for s, enc in enumerate(self.encoders):
            if s:
                x = F.gelu(self.down[s - 1](x))
            lm = F.adaptive_avg_pool2d(landmarks, x.shape[-2:])
            x = enc(x, self.landmark_proj[s](lm))
            outs.append(x)
        return outs


class FusionHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.fusion_dim
        self.heads = cfg.fusion_heads
        self.grids = [min(cfg.fusion_grid, s) for s in cfg.scale_sizes()]
        n_tokens = sum(g * g for g in self.grids)
        self.proj = nn.ModuleList(nn.Linear(2 * c, d) for c in cfg.channels)
        self.pos = nn.Parameter(torch.randn(n_tokens, d) * 0.02)
        self.w_qkv = nn.Linear(d, 3 * d, bias=False)
        self.w_o = nn.Linear(d, d)
        self.norm = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))
        self.head = nn.Linear(d, cfg.n_classes)
        self.last_attn: Optional[Tensor] = None

    def tokens(self, f_scales: Sequence[Tensor], o_scales: Sequence[Tensor]) -> Tensor:
        n = len(self.proj)
        if len(f_scales) != n or len(o_scales) != n:
            raise ValueError(f"expected {n} scales from both branches, got {len(f_scales)} and {len(o_scales)}")
        xs = []
        for s, (f, o) in enumerate(zip(f_scales, o_scales)):
            x = torch.cat([f, o], dim=1)
            x = F.adaptive_avg_pool2d(x, self.grids[s]).flatten(2).transpose(1, 2)
            xs.append(self.proj[s](x))
        return torch.cat(xs, dim=1) + self.pos

    def pooled(self, f_scales: Sequence[Tensor], o_scales: Sequence[Tensor]) -> Tensor:
        x = self.tokens(f_scales, o_scales)
        q, k, v = self.w_qkv(x).chunk(3, dim=-1)
        attn_out, attn = multihead_attention(q, k, v, self.heads)
        self.last_attn = attn.detach()
        x = self.w_o(attn_out) + x
        y = self.mlp(self.norm(x)) + x
        return y.mean(dim=1)

    def forward(self, f_scales: Sequence[Tensor], o_scales: Sequence[Tensor]) -> Tensor:
        return self.head(self.pooled(f_scales, o_scales))


class LLFormer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.dtnet = DTNet(cfg)
        self.dlnet = DLNet(cfg)
        self.fusion = FusionHead(cfg)

    def _check(self, images: Tensor, landmarks: Tensor, z: Tensor) -> None:
        size = self.cfg.image_size
        if images.shape[-2:] != (size, size) or landmarks.shape[-2:] != (size, size):
            raise ValueError(f"expected {size}x{size} inputs")
        if landmarks.shape[1] != self.cfg.n_landmarks:
            raise ValueError(f"expected {self.cfg.n_landmarks} landmark channels, got {landmarks.shape[1]}")
        if z.shape[-1] != self.cfg.epd_dim:
            raise ValueError(f"EPD has dim {z.shape[-1]}, expected {self.cfg.epd_dim}")

    def features(self, images: Tensor, landmarks: Tensor, z: Tensor) -> Tensor:
        self._check(images, landmarks, z)
        return self.fusion.pooled(self.dtnet(images, z), self.dlnet(images, landmarks))

    def forward(self, images: Tensor, landmarks: Tensor, z: Tensor) -> Tensor:
        return self.fusion.head(self.features(images, landmarks, z))


def ce_loss(logits: Tensor, labels: Tensor, reduction: str = "sum") -> Tensor:
    """-sum_i sum_c y_ic log p_ic; ``reduction='mean'`` divides by N."""
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[-1]})")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    return F.cross_entropy(logits, labels, reduction=reduction)
