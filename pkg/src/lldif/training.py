"""Two-stage training with Adam and checkpoint handoff."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
import torch
from torch import Tensor

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .data import Sample, stack_batch
from .pipeline import Stage1Model, Stage2Model, check_compatible

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, msg: str, snapshot: Optional[dict] = None):
        super().__init__(msg)
        self.snapshot = snapshot or {}


@dataclass
class Batch:
    images: Tensor
    landmarks: Tensor
    labels: Tensor
    captions: list[str]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: Union[Stage1Model, Stage2Model]
    history: list[dict] = field(default_factory=list)

    def epoch_means(self, key: str) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for h in self.history:
            by_epoch.setdefault(h["epoch"], []).append(h[key])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def to_batch(samples: Sequence[Sample], dtype: torch.dtype = torch.float32) -> Batch:
    images, landmarks, labels = stack_batch(samples)
    return Batch(
        torch.from_numpy(images).to(dtype),
        torch.from_numpy(landmarks).to(dtype),
        torch.from_numpy(labels),
        [s.caption for s in samples],
    )


def iterate_batches(samples: Sequence[Sample], batch_size: int, generator: torch.Generator) -> Iterator[Batch]:
    """Shuffled batches; a trailing batch of one is dropped (contrastive loss needs >= 2)."""
    order = torch.randperm(len(samples), generator=generator).tolist()
    for i in range(0, len(order), batch_size):
        idx = order[i : i + batch_size]
        if len(idx) < 2:
            continue
        yield to_batch([samples[j] for j in idx])


def _optimizer(params, cfg: TrainConfig, total_steps: int):
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = None
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, total_steps))
    return opt, sched


def _total_steps(cfg: TrainConfig, n: int) -> int:
    per_epoch = sum(1 for i in range(0, n, cfg.batch_size) if min(cfg.batch_size, n - i) >= 2)
    total = per_epoch * cfg.epochs
    return min(total, cfg.max_steps) if cfg.max_steps else total


class _Logger:
    def __init__(self, path: Optional[str | os.PathLike]):
        self.fh = open(path, "w") if path else None

    def write(self, rec: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _check_finite(losses: dict[str, Tensor], step: int, epoch: int, diag_dir: Optional[Path]) -> None:
    vals = {k: float(v.detach()) for k, v in losses.items() if k != "logits"}
    if all(math.isfinite(v) for v in vals.values()):
        return
    snap = {"step": step, "epoch": epoch, "losses": {k: repr(v) for k, v in vals.items()}}
    if diag_dir is not None:
        diag_dir.mkdir(parents=True, exist_ok=True)
        (diag_dir / "diverged.json").write_text(json.dumps(snap, indent=2))
    raise TrainingError(f"non-finite loss at step {step}: {snap['losses']}", snap)


def _run(model, params, cfg: TrainConfig, samples: Sequence[Sample], step_fn, keys: Sequence[str],
         log_path, diag_dir) -> list[dict]:
    if not samples:
        raise TrainingError("empty dataset")
    if len(samples) < 2:
        raise TrainingError("need at least 2 samples")
    gen = torch.Generator().manual_seed(cfg.seed)
    total = _total_steps(cfg, len(samples))
    opt, sched = _optimizer(params, cfg, total)
    log = _Logger(log_path)
    history: list[dict] = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            for batch in iterate_batches(samples, cfg.batch_size, gen):
                if step >= total:
                    break
                losses = step_fn(batch, gen)
                _check_finite(losses, step, epoch, diag_dir)
                opt.zero_grad(set_to_none=True)
                losses["loss"].backward()
                opt.step()
                rec = {"step": step, "epoch": epoch, "lr": opt.param_groups[0]["lr"]}
                rec.update({k: float(losses[k].detach()) for k in keys})
                if sched is not None:
                    sched.step()
                history.append(rec)
                log.write(rec)
                step += 1
            if step >= total:
                break
    finally:
        log.close()
    return history


def train_stage1(
    cfg: TrainConfig,
    samples: Sequence[Sample],
    log_path: Optional[str | os.PathLike] = None,
    out_path: Optional[str | os.PathLike] = None,
) -> TrainResult:
    """Jointly fit LA-CLIP alignment and LLformer cross entropy on Z = PNET_s1(...)."""
    if cfg.stage != 1:
        cfg = cfg.replace(stage=1)
    torch.manual_seed(cfg.seed)
    model = Stage1Model(cfg.model)
    model.train()

    def step_fn(batch: Batch, gen: torch.Generator) -> dict[str, Tensor]:
        return model.losses(batch.images, batch.landmarks, batch.labels, batch.captions)

    diag = Path(out_path).parent if out_path else None
    history = _run(model, list(model.parameters()), cfg, samples, step_fn, ("loss", "align", "ce"), log_path, diag)
    model.eval()
    ckpt = Checkpoint(
        stage=1,
        config=cfg.model.to_dict(),
        fingerprint=cfg.model.fingerprint(),
        arrays=model.arrays(),
        extra={"train_config": cfg.to_dict(), "loss_curve": [h["loss"] for h in history]},
    )
    if out_path:
        save_checkpoint(out_path, ckpt)
    return TrainResult(ckpt, model, history)


def train_stage2(
    cfg: TrainConfig,
    samples: Sequence[Sample],
    s1_checkpoint: Union[Checkpoint, str, os.PathLike],
    log_path: Optional[str | os.PathLike] = None,
    out_path: Optional[str | os.PathLike] = None,
) -> TrainResult:
    """Fit PNET_s2, the denoiser and the LLformer with LA-CLIP + PNET_s1 frozen."""
    if cfg.stage != 2:
        cfg = cfg.replace(stage=2)
    s1 = s1_checkpoint if isinstance(s1_checkpoint, Checkpoint) else load_checkpoint(s1_checkpoint)
    if s1.stage != 1:
        raise CheckpointError(f"expected a stage-1 checkpoint, got stage {s1.stage}")
    check_compatible(s1, cfg.model)
    model_cfg = ModelConfig.from_dict(s1.config).replace(T=cfg.T, variant=cfg.variant)
    torch.manual_seed(cfg.seed)
    model = Stage2Model(model_cfg, use_diffusion=cfg.use_diffusion, insert_noise=cfg.insert_noise)
    model.load_stage1(s1)
    model.train()
    model.laclip.eval()
    model.pnet_s1.eval()
    params = [p for p in model.parameters() if p.requires_grad]
    c = model_cfg.epd_dim

    def step_fn(batch: Batch, gen: torch.Generator) -> dict[str, Tensor]:
        noise = torch.randn(len(batch.labels), c, generator=gen)
        return model.losses(batch.images, batch.landmarks, batch.labels, noise, cfg.loss)

    diag = Path(out_path).parent if out_path else None
    history = _run(model, params, cfg, samples, step_fn, ("loss", "ce", "kl"), log_path, diag)
    model.eval()
    ckpt = Checkpoint(
        stage=2,
        config=model_cfg.to_dict(),
        fingerprint=model_cfg.fingerprint(),
        arrays=model.arrays(),
        extra={
            "train_config": cfg.to_dict(),
            "stage1_fingerprint": s1.fingerprint,
            "use_diffusion": cfg.use_diffusion,
            "insert_noise": cfg.insert_noise,
            "loss": cfg.loss,
            "seed": cfg.seed,
            "loss_curve": [h["loss"] for h in history],
            "kl_curve": [h["kl"] for h in history],
        },
    )
    if out_path:
        save_checkpoint(out_path, ckpt)
    return TrainResult(ckpt, model, history)


def model_from_checkpoint(ckpt: Union[Checkpoint, str, os.PathLike], T: Optional[int] = None):
    """Rebuild the stage-1 or stage-2 model stored in ``ckpt`` (eval mode)."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    cfg = ModelConfig.from_dict(ckpt.config)
    if cfg.fingerprint() != ckpt.fingerprint:
        raise CheckpointError("checkpoint fingerprint does not match its embedded config")
    if ckpt.stage == 1:
        model = Stage1Model(cfg)
    elif ckpt.stage == 2:
        model = Stage2Model(
            cfg,
            use_diffusion=ckpt.extra.get("use_diffusion", True),
            insert_noise=ckpt.extra.get("insert_noise", True),
            T=T or cfg.T,
        )
    else:
        raise CheckpointError(f"unknown stage {ckpt.stage}")
    model.load_arrays(ckpt)
    model.eval()
    return model
