"""Accuracy reports, ablation grid, diffusion-step sweep and embedding export."""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint
from .config import TrainConfig
from .data import Sample
from .diffusion import default_schedule
from .pipeline import Stage1Model, Stage2Model
from .training import model_from_checkpoint, to_batch, train_stage2

# Reported full-scale results, kept as context only. Desk-scale runs are not
# expected to match them.
PAPER_REFERENCE = {
    "note": "paper-scale results on licensed datasets; not reproducible at desk scale",
    "ablation_accuracy": {"V1": 89.46, "V2": 91.67, "V3": 92.16, "V4": 92.97},
    "lowlight_accuracy": {"LL-RAF-DB": 82.26, "LL-FERPlus": 82.25, "LL-KDEF": 92.97},
    "clear_accuracy": {"RAF-DB": 91.72, "FERPlus": 87.19, "KDEF": 95.83},
    "kdef_confidence": {"clear": 0.57, "lowlight": 0.53, "accuracy": 0.929},
}

# Table rows: (diffusion model, L_ce, L_total, insert noise)
ABLATION_ROWS = {
    "V1": {"diffusion": False, "ce": True, "total": False, "insert_noise": False},
    "V2": {"diffusion": True, "ce": False, "total": True, "insert_noise": True},
    "V3": {"diffusion": True, "ce": True, "total": False, "insert_noise": False},
    "V4": {"diffusion": True, "ce": True, "total": False, "insert_noise": True},
}

Model = Union[Stage1Model, Stage2Model]


def inference_noise(n: int, dim: int, seed: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard-normal chain starts, one row per sample, fixed by ``seed``."""
    return torch.randn(n, dim, generator=torch.Generator().manual_seed(seed), dtype=dtype)


@torch.no_grad()
def run_model(model: Model, samples: Sequence[Sample], seed: int = 0, batch_size: int = 64):
    """Return (logits, epd, penultimate) for every sample, in order."""
    model.eval()
    noise = inference_noise(len(samples), model.cfg.epd_dim, seed)
    logits, epds, feats = [], [], []
    for i in range(0, len(samples), batch_size):
        b = to_batch(samples[i : i + batch_size])
        if isinstance(model, Stage2Model):
            z, f = model.embed(b.images, b.landmarks, noise[i : i + batch_size])
        else:
            z, f = model.embed(b.images, b.landmarks)
        epds.append(z)
        feats.append(f)
        logits.append(model.llformer.fusion.head(f))
    return torch.cat(logits).numpy(), torch.cat(epds).numpy(), torch.cat(feats).numpy()


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: list[float]
    confusion: list[list[int]]
    mean_confidence_correct: dict[str, Optional[float]]
    mean_confidence: dict[str, Optional[float]]
    n: int
    predictions: list[int] = field(default_factory=list)
    confidences: list[float] = field(default_factory=list)
    correct: list[bool] = field(default_factory=list)
    lowlight: list[bool] = field(default_factory=list)
    reference: dict = field(default_factory=lambda: dict(PAPER_REFERENCE))

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def table(self, class_names: Optional[Sequence[str]] = None) -> str:
        names = class_names or [str(i) for i in range(len(self.confusion))]
        lines = [f"accuracy {self.accuracy:.4f}  (n={self.n})"]
        for name, acc in zip(names, self.per_class_accuracy):
            lines.append(f"  {name:<10s} {acc:.4f}")
        for k, v in self.mean_confidence_correct.items():
            lines.append(f"  confidence[{k}] " + ("n/a" if v is None else f"{v:.4f}"))
        return "\n".join(lines)


def _mean(x: np.ndarray) -> Optional[float]:
    return float(x.mean()) if x.size else None


def report_from_logits(logits: np.ndarray, labels: np.ndarray, lowlight: Optional[np.ndarray] = None) -> EvalReport:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    m = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(f"labels outside [0, {m})")
    lowlight = np.ones(len(labels), bool) if lowlight is None else np.asarray(lowlight, bool)
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    pred = logits.argmax(1)
    conf = p.max(1)
    correct = pred == labels
    confusion = np.zeros((m, m), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    counts = confusion.sum(1)
    per_class = [float(confusion[c, c] / counts[c]) if counts[c] else 0.0 for c in range(m)]
    subsets = {"clear": ~lowlight, "lowlight": lowlight}
    return EvalReport(
        accuracy=float(np.trace(confusion) / max(1, len(labels))),
        per_class_accuracy=per_class,
        confusion=confusion.tolist(),
        mean_confidence_correct={k: _mean(conf[s & correct]) for k, s in subsets.items()},
        mean_confidence={k: _mean(conf[s]) for k, s in subsets.items()},
        n=int(len(labels)),
        predictions=pred.tolist(),
        confidences=conf.tolist(),
        correct=correct.tolist(),
        lowlight=lowlight.tolist(),
    )


def _as_model(ckpt: Union[Checkpoint, str, os.PathLike, Model], T: Optional[int] = None) -> Model:
    if isinstance(ckpt, (Stage1Model, Stage2Model)):
        if T is not None and isinstance(ckpt, Stage2Model) and ckpt.use_diffusion:
            ckpt.set_schedule(default_schedule(T))
        return ckpt
    return model_from_checkpoint(ckpt, T)


def evaluate(
    checkpoint: Union[Checkpoint, str, os.PathLike, Model],
    samples: Sequence[Sample],
    T: Optional[int] = None,
    seed: int = 0,
) -> EvalReport:
    """Accuracy and confidence report; stage-2 checkpoints use the label-free chain."""
    model = _as_model(checkpoint, T)
    labels = np.array([s.label for s in samples])
    if labels.size and labels.max() >= model.cfg.n_classes:
        raise ValueError(
            f"dataset has label {labels.max()} but checkpoint was trained for {model.cfg.n_classes} classes"
        )
    logits, _, _ = run_model(model, samples, seed)
    return report_from_logits(logits, labels, np.array([s.lowlight for s in samples]))


@dataclass
class AblationRow:
    variant: str
    diffusion: bool
    ce: bool
    total: bool
    insert_noise: bool
    accuracy: float
    paper_accuracy: float
    built_denoiser: bool
    built_schedule: bool


@dataclass
class AblationGrid:
    rows: list[AblationRow]
    reference: dict = field(default_factory=lambda: dict(PAPER_REFERENCE))

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "reference": self.reference}

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def table(self) -> str:
        mark = {True: "x", False: "-"}
        lines = ["variant  DM  L_ce  L_total  noise   acc     paper*"]
        for r in self.rows:
            lines.append(
                f"{r.variant:<8s} {mark[r.diffusion]:^3s} {mark[r.ce]:^5s} {mark[r.total]:^8s} "
                f"{mark[r.insert_noise]:^6s} {r.accuracy:6.4f}  {r.paper_accuracy:.2f}"
            )
        lines.append("* paper-scale reference, not a desk-scale expectation")
        return "\n".join(lines)


def ablation_config(base: TrainConfig, variant: str) -> TrainConfig:
    row = ABLATION_ROWS[variant]
    return base.replace(
        stage=2,
        use_diffusion=row["diffusion"],
        loss="total" if row["total"] else "ce",
        insert_noise=row["insert_noise"],
    )


def ablation_run(
    base_cfg: TrainConfig,
    samples: Sequence[Sample],
    s1_checkpoint: Union[Checkpoint, str, os.PathLike],
    eval_samples: Optional[Sequence[Sample]] = None,
    out_dir: Optional[str | os.PathLike] = None,
) -> AblationGrid:
    """Train and score the four stage-2 variants from one stage-1 checkpoint."""
    s1 = s1_checkpoint if isinstance(s1_checkpoint, Checkpoint) else load_checkpoint(s1_checkpoint)
    rows = []
    for variant, row in ABLATION_ROWS.items():
        cfg = ablation_config(base_cfg, variant)
        out = Path(out_dir) / f"stage2_{variant}.npz" if out_dir else None
        res = train_stage2(cfg, samples, s1, out_path=out)
        model = res.model
        rep = evaluate(model, eval_samples if eval_samples is not None else samples, seed=cfg.seed)
        rows.append(
            AblationRow(
                variant=variant,
                accuracy=rep.accuracy,
                paper_accuracy=PAPER_REFERENCE["ablation_accuracy"][variant],
                built_denoiser=model.denoiser is not None,
                built_schedule=model.schedule is not None,
                **row,
            )
        )
    return AblationGrid(rows)


@dataclass
class SweepRow:
    T: int
    accuracy: float
    seconds: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    epd: dict[int, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        # wall time is kept out so the file is reproducible; see timings()
        return {"rows": [{"T": r.T, "accuracy": r.accuracy} for r in self.rows]}

    def timings(self) -> dict:
        return {str(r.T): r.seconds for r in self.rows}

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def iteration_sweep(
    checkpoint: Union[Checkpoint, str, os.PathLike],
    samples: Sequence[Sample],
    T_list: Sequence[int],
    seed: int = 0,
    retrain: bool = False,
    train_samples: Optional[Sequence[Sample]] = None,
    s1_checkpoint: Union[Checkpoint, str, os.PathLike, None] = None,
    base_cfg: Optional[TrainConfig] = None,
) -> SweepResult:
    """Accuracy per chain length.

    By default only inference is re-run, with the default schedule rebuilt
    for each T. ``retrain=True`` trains a fresh stage-2 model per T, which
    needs ``train_samples``, ``s1_checkpoint`` and ``base_cfg``.
    """
    if any(t <= 0 for t in T_list):
        raise ValueError(f"every T must be positive, got {list(T_list)}")
    if retrain and (train_samples is None or s1_checkpoint is None or base_cfg is None):
        raise ValueError("retrain=True needs train_samples, s1_checkpoint and base_cfg")
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    labels = np.array([s.label for s in samples])
    flags = np.array([s.lowlight for s in samples])
    result = SweepResult([])
    for T in T_list:
        start = time.perf_counter()
        if retrain:
            model = train_stage2(base_cfg.replace(T=T), train_samples, s1_checkpoint).model
        else:
            model = model_from_checkpoint(ckpt, T)
        logits, epd, _ = run_model(model, samples, seed)
        rep = report_from_logits(logits, labels, flags)
        result.rows.append(SweepRow(T, rep.accuracy, time.perf_counter() - start))
        result.epd[T] = epd
    return result


def _write_array(path: Path, arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    path.write_bytes(arr.tobytes())
    return {"file": path.name, "dtype": arr.dtype.str, "shape": list(arr.shape)}


def export_embeddings(
    checkpoint: Union[Checkpoint, str, os.PathLike, Model],
    samples: Sequence[Sample],
    out_dir: str | os.PathLike,
    layer: str = "epd",
    seed: int = 0,
    T: Optional[int] = None,
) -> dict:
    """Write row-aligned embedding / label / low-light-flag arrays plus a JSON header."""
    if layer not in ("epd", "penultimate"):
        raise ValueError(f"layer must be 'epd' or 'penultimate', got {layer!r}")
    model = _as_model(checkpoint, T)
    _, epd, feats = run_model(model, samples, seed)
    emb = (epd if layer == "epd" else feats).astype(np.float32)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "layer": layer,
        "embeddings": _write_array(out / "embeddings.bin", emb),
        "labels": _write_array(out / "labels.bin", np.array([s.label for s in samples], dtype=np.int64)),
        "lowlight": _write_array(out / "lowlight.bin", np.array([s.lowlight for s in samples], dtype=np.uint8)),
    }
    (out / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    return header


def read_exported(out_dir: str | os.PathLike) -> dict[str, np.ndarray]:
    out = Path(out_dir)
    header = json.loads((out / "header.json").read_text())
    arrays = {}
    for key in ("embeddings", "labels", "lowlight"):
        h = header[key]
        arrays[key] = np.frombuffer((out / h["file"]).read_bytes(), dtype=np.dtype(h["dtype"])).reshape(h["shape"])
    return arrays
