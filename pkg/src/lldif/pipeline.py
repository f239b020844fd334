"""Stage-1 and stage-2 model assemblies."""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
from torch import Tensor

from .checkpoint import Checkpoint, CheckpointError, load_module, module_arrays
from .config import COMPAT_FIELDS, ModelConfig
from .diffusion import BetaSchedule, Denoiser, default_schedule, kl_loss, q_sample, run_reverse_chain
from .laclip import LAClip, alignment_loss
from .llformer import LLFormer, ce_loss
from .pnet import PNetS1, PNetS2, check_prior_dims


class Stage1Model(nn.Module):
    """LA-CLIP + PNET_s1 produce the prior Z that steers the LLformer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.laclip = LAClip(cfg)
        self.pnet_s1 = PNetS1(cfg)
        self.llformer = LLFormer(cfg)

    def epd(self, images: Tensor) -> Tensor:
        emb = self.laclip.encode_image(images)
        return self.pnet_s1(emb.feat, emb.label_pred)

    def losses(self, images: Tensor, landmarks: Tensor, labels: Tensor, captions: Sequence[str]) -> dict[str, Tensor]:
        emb = self.laclip.encode_image(images)
        cap = self.laclip.encode_captions(captions)
        lab = self.laclip.encode_labels(labels)
        align = alignment_loss(emb.feat, cap, emb.label_pred, lab, self.laclip.temperature)
        z = self.pnet_s1(emb.feat, emb.label_pred)
        logits = self.llformer(images, landmarks, z)
        ce = ce_loss(logits, labels, self.cfg.ce_reduction)
        return {"loss": align + ce, "align": align, "ce": ce, "logits": logits}

    def infer(self, images: Tensor, landmarks: Tensor) -> Tensor:
        return self.llformer(images, landmarks, self.epd(images))

    def embed(self, images: Tensor, landmarks: Tensor) -> tuple[Tensor, Tensor]:
        z = self.epd(images)
        return z, self.llformer.features(images, landmarks, z)

    def arrays(self) -> dict:
        out = {}
        for name in ("laclip", "pnet_s1", "llformer"):
            out.update(module_arrays(name, getattr(self, name)))
        return out

    def load_arrays(self, ckpt: Checkpoint) -> None:
        for name in ("laclip", "pnet_s1", "llformer"):
            load_module(getattr(self, name), ckpt.group(name), name)


class Stage2Model(nn.Module):
    """PNET_s2 + reverse diffusion chain estimate Z from the image alone.

    ``use_diffusion=False`` (ablation V1) feeds x_s2 straight to the LLformer
    and never builds a schedule or a denoiser. With ``insert_noise`` the
    training chain starts from the forward-diffused stage-1 prior and the
    inference chain from a standard normal draw; without it both start at
    x_s2.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        use_diffusion: bool = True,
        insert_noise: bool = True,
        T: Optional[int] = None,
        variant: Optional[str] = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.use_diffusion = use_diffusion
        self.insert_noise = insert_noise and use_diffusion
        self.variant = variant or cfg.variant
        self.laclip = LAClip(cfg)
        self.pnet_s1 = PNetS1(cfg)
        self.pnet_s2 = PNetS2(cfg)
        check_prior_dims(self.pnet_s1, self.pnet_s2)
        self.llformer = LLFormer(cfg)
        self.denoiser: Optional[Denoiser] = None
        self.schedule: Optional[BetaSchedule] = None
        if use_diffusion:
            self.denoiser = Denoiser(cfg.epd_dim, cfg.denoiser_layers)
            self.schedule = default_schedule(T or cfg.T)
        for p in list(self.laclip.parameters()) + list(self.pnet_s1.parameters()):
            p.requires_grad_(False)

    @property
    def trainable_groups(self) -> list[str]:
        return ["pnet_s2", "llformer"] + (["denoiser"] if self.use_diffusion else [])

    def set_schedule(self, schedule: BetaSchedule) -> None:
        if not self.use_diffusion:
            raise ValueError("model was built without diffusion")
        self.schedule = schedule

    @torch.no_grad()
    def reference_epd(self, images: Tensor) -> Tensor:
        emb = self.laclip.encode_image(images)
        return self.pnet_s1(emb.feat, emb.label_pred)

    def estimate_epd(self, images: Tensor, noise: Optional[Tensor] = None, z_ref: Optional[Tensor] = None,
                     trace: Optional[list] = None) -> Tensor:
        """Z_0' from images. ``z_ref`` (training only) is diffused when inserting noise."""
        x_s2 = self.pnet_s2(images)
        if not self.use_diffusion:
            return x_s2
        if not self.insert_noise:
            z_T = x_s2
        else:
            if noise is None:
                raise ValueError("insert-noise chain needs an explicit noise draw")
            z_T = noise if z_ref is None else q_sample(z_ref, self.schedule, noise)
        return run_reverse_chain(z_T, x_s2, self.schedule, self.denoiser, self.variant, trace)

    def losses(self, images: Tensor, landmarks: Tensor, labels: Tensor, noise: Optional[Tensor],
               loss: str = "total") -> dict[str, Tensor]:
        z_ref = self.reference_epd(images)
        z_hat = self.estimate_epd(images, noise, z_ref)
        logits = self.llformer(images, landmarks, z_hat)
        ce = ce_loss(logits, labels, self.cfg.ce_reduction)
        kl = kl_loss(z_ref, z_hat, self.cfg.ce_reduction)
        total = ce + kl if loss == "total" else ce
        return {"loss": total, "ce": ce, "kl": kl, "logits": logits}

    def infer(self, images: Tensor, landmarks: Tensor, noise: Optional[Tensor] = None) -> Tensor:
        """Logits from images and landmarks only; no label enters this path."""
        return self.llformer(images, landmarks, self.estimate_epd(images, noise))

    def embed(self, images: Tensor, landmarks: Tensor, noise: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
        z = self.estimate_epd(images, noise)
        return z, self.llformer.features(images, landmarks, z)

    def arrays(self) -> dict:
        out = {}
        for name in ("laclip", "pnet_s1", "pnet_s2", "llformer"):
            out.update(module_arrays(name, getattr(self, name)))
        if self.denoiser is not None:
            out.update(module_arrays("denoiser", self.denoiser))
        return out

    def load_stage1(self, ckpt: Checkpoint) -> None:
        if ckpt.stage != 1:
            raise CheckpointError(f"expected a stage-1 checkpoint, got stage {ckpt.stage}")
        check_compatible(ckpt, self.cfg)
        for name in ("laclip", "pnet_s1", "llformer"):
            load_module(getattr(self, name), ckpt.group(name), name)

    def load_arrays(self, ckpt: Checkpoint) -> None:
        for name in ("laclip", "pnet_s1", "pnet_s2", "llformer"):
            load_module(getattr(self, name), ckpt.group(name), name)
        if self.denoiser is not None:
            load_module(self.denoiser, ckpt.group("denoiser"), "denoiser")


def check_compatible(ckpt: Checkpoint, cfg: ModelConfig) -> None:
    """Reject a checkpoint whose architecture fingerprint or key dims disagree."""
    saved = ModelConfig.from_dict(ckpt.config)
    if saved.fingerprint() != ckpt.fingerprint:
        raise CheckpointError("checkpoint fingerprint does not match its embedded config")
    bad = [f for f in COMPAT_FIELDS if getattr(saved, f) != getattr(cfg, f)]
    if bad:
        raise CheckpointError(f"stage-1 checkpoint incompatible with config on: {', '.join(bad)}")
