"""Dataset ingestion, landmark heatmaps and the procedural toy dataset.

On-disk layout::

    root/
      train/<class_name>/*.png|jpg
      test/<class_name>/*.png|jpg
      landmarks/<split>/<class_name>/<stem>.npy        (K x H x W), or
      landmarks/<split>/<class_name>/<stem>_lm<k>.png  (one file per landmark)

Class directories must name expression classes from the closed vocabulary.
When ``landmarks/`` is absent a canonical 5-point template is rendered.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .config import CAPTION_TEMPLATE, CLASS_NAMES
from .degrade import IMAGE_EXTS, DegradeParams, apply_lowlight, read_image, write_image

SPLITS = ("train", "test")

# (row, col) as a fraction of the image side: eyes, nose tip, mouth corners.
CANONICAL_LANDMARKS = np.array(
    [[0.38, 0.33], [0.38, 0.67], [0.55, 0.50], [0.74, 0.36], [0.74, 0.64]]
)


class DatasetError(ValueError):
    pass


def caption_for(label_name: str) -> str:
    return CAPTION_TEMPLATE.format(label=label_name)


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    landmarks: np.ndarray  # K x H x W, peak-normalized heatmaps
    label: int
    caption: str
    split: str = "train"
    path: Optional[str] = None
    lowlight: bool = True

    def __post_init__(self) -> None:
        validate_sample(self)


def validate_sample(s: Sample, n_classes: int = len(CLASS_NAMES)) -> None:
    if s.image.ndim != 3 or s.image.shape[-1] != 3:
        raise DatasetError(f"image must be HxWx3, got {s.image.shape}")
    if not np.all(np.isfinite(s.image)) or s.image.min() < 0 or s.image.max() > 1:
        raise DatasetError("image values must be finite and in [0, 1]")
    if s.landmarks.ndim != 3 or s.landmarks.shape[1:] != s.image.shape[:2]:
        raise DatasetError(f"landmarks {s.landmarks.shape} do not match image {s.image.shape}")
    if s.landmarks.min() < 0 or not np.allclose(s.landmarks.reshape(len(s.landmarks), -1).max(1), 1.0):
        raise DatasetError("landmark heatmaps must be non-negative with peak 1")
    if not 0 <= s.label < n_classes:
        raise DatasetError(f"label {s.label} outside [0, {n_classes})")
    if s.split not in SPLITS:
        raise DatasetError(f"unknown split {s.split!r}")


@dataclass
class DatasetManifest:
    class_names: list[str]
    counts: dict[str, list[int]]  # split -> per-class counts
    resolution: tuple[int, int]
    n_landmarks: int
    landmarks: str = "files"  # or "synthetic"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "counts": {k: list(v) for k, v in self.counts.items()},
            "resolution": list(self.resolution),
            "n_landmarks": self.n_landmarks,
            "landmarks": self.landmarks,
            **self.extra,
        }

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def render_heatmaps(points: np.ndarray, size: tuple[int, int], sigma: Optional[float] = None) -> np.ndarray:
    """Gaussian heatmaps with value exactly 1 at each (rounded) landmark pixel."""
    h, w = size
    sigma = sigma or max(1.0, min(h, w) / 16)
    rows, cols = np.mgrid[0:h, 0:w]
    maps = []
    for r, c in points:
        r = int(np.clip(round(r), 0, h - 1))
        c = int(np.clip(round(c), 0, w - 1))
        maps.append(np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sigma**2)))
    return np.stack(maps).astype(np.float32)


def template_landmarks(size: tuple[int, int], k: int = 5) -> np.ndarray:
    if k > len(CANONICAL_LANDMARKS):
        pts = np.concatenate([CANONICAL_LANDMARKS, np.linspace(0.2, 0.8, 2 * (k - 5)).reshape(-1, 2)])
    else:
        pts = CANONICAL_LANDMARKS[:k]
    h, w = size
    return render_heatmaps(pts * np.array([h - 1, w - 1]), size)


def _resize(img: np.ndarray, res: tuple[int, int]) -> np.ndarray:
    if img.shape[:2] == res:
        return img
    pil = Image.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8))
    return np.asarray(pil.resize((res[1], res[0]), Image.BILINEAR), dtype=np.float32) / 255.0


def _load_landmarks(lm_dir: Path, stem: str, res: tuple[int, int]) -> Optional[np.ndarray]:
    npy = lm_dir / f"{stem}.npy"
    if npy.exists():
        lm = np.load(npy).astype(np.float32)
    else:
        pngs = sorted(lm_dir.glob(f"{stem}_lm*.png"))
        if not pngs:
            return None
        lm = np.stack([np.asarray(Image.open(p).convert("L"), dtype=np.float32) / 255.0 for p in pngs])
    if lm.shape[1:] != res:
        lm = np.stack([np.asarray(Image.fromarray(m).resize((res[1], res[0]), Image.BILINEAR)) for m in lm])
    peak = lm.reshape(len(lm), -1).max(1).reshape(-1, 1, 1)
    return np.clip(lm / np.maximum(peak, 1e-12), 0, 1).astype(np.float32)


def load_dataset(
    root: str | os.PathLike,
    resolution: Optional[int] = None,
    n_landmarks: int = 5,
    class_names: Sequence[str] = CLASS_NAMES,
) -> tuple[list[Sample], DatasetManifest]:
    """Load ``root/{train,test}/{class}/*`` in lexicographic order."""
    root = Path(root)
    present = [s for s in SPLITS if (root / s).is_dir()]
    if not present:
        raise DatasetError(f"{root} has no train/ or test/ directory")
    found: set[str] = set()
    for split in present:
        for d in (root / split).iterdir():
            if d.is_dir():
                if d.name not in CLASS_NAMES:
                    raise DatasetError(f"unknown class directory: {d}")
                found.add(d.name)
    # keep vocabulary order so label ids are stable across splits
    names = [c for c in class_names if c in found]
    if len(names) != len(found):
        raise DatasetError(f"class directories {sorted(found - set(names))} not in requested class_names")

    lm_root = root / "landmarks"
    synthetic = not lm_root.is_dir()
    res: Optional[tuple[int, int]] = (resolution, resolution) if resolution else None
    samples: list[Sample] = []
    counts: dict[str, list[int]] = {}
    missing: list[str] = []
    for split in present:
        counts[split] = [0] * len(names)
        for label, name in enumerate(names):
            cdir = root / split / name
            if not cdir.is_dir():
                continue
            for p in sorted(cdir.iterdir()):
                if p.suffix.lower() not in IMAGE_EXTS:
                    continue
                img = read_image(p)
                if res is None:
                    res = img.shape[:2]
                elif img.shape[:2] != res:
                    if resolution is None:
                        raise DatasetError(f"{p} is {img.shape[:2]}, expected {res}; pass resolution=")
                    img = _resize(img, res)
                if synthetic:
                    lm = template_landmarks(res, n_landmarks)
                else:
                    lm = _load_landmarks(lm_root / split / name, p.stem, res)
                    if lm is None:
                        missing.append(str(p.relative_to(root)))
                        continue
                samples.append(Sample(img, lm, label, caption_for(name), split, str(p)))
                counts[split][label] += 1
    if missing:
        raise DatasetError(f"images without landmark files: {missing}")
    if not samples:
        raise DatasetError(f"no images under {root}")
    k = samples[0].landmarks.shape[0]
    manifest = DatasetManifest(names, counts, res, k, "synthetic" if synthetic else "files")
    return samples, manifest


def _pattern(label: int, n_classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Oriented grating whose angle and frequency encode the class."""
    rows, cols = np.mgrid[0:size, 0:size] / size
    theta = np.pi * label / n_classes + rng.normal(0, 0.05)
    freq = 2.0 + 1.5 * (label % 3) + rng.normal(0, 0.1)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * rows + np.sin(theta) * cols) + phase)
    tint = np.array([1.0, 0.8 + 0.2 * (label % 2), 0.6 + 0.4 * ((label // 2) % 2)])
    img = 0.15 + 0.7 * wave[..., None] * tint + rng.normal(0, 0.03, (size, size, 3))
    return np.clip(img, 0, 1)


def synth_toy_dataset(
    n_classes: int,
    n_per_class: int,
    resolution: int = 32,
    seed: int = 0,
    n_landmarks: int = 5,
    lowlight: Optional[DegradeParams] = DegradeParams(),
    split: str = "train",
    window_size: int = 4,
) -> tuple[list[Sample], DatasetManifest]:
    """Class-separable procedural faces-in-name-only for desk-scale runs."""
    if n_classes < 2 or n_classes > len(CLASS_NAMES):
        raise DatasetError(f"n_classes must be in [2, {len(CLASS_NAMES)}]")
    if resolution < window_size:
        raise DatasetError(f"resolution {resolution} below window size {window_size}")
    rng = np.random.default_rng(seed)
    base = CANONICAL_LANDMARKS[: min(n_landmarks, 5)] * (resolution - 1)
    samples = []
    for label in range(n_classes):
        for _ in range(n_per_class):
            img = _pattern(label, n_classes, resolution, rng)
            if lowlight is not None:
                img = apply_lowlight(img, lowlight)
            pts = base + rng.normal(0, resolution / 64, base.shape)
            lm = render_heatmaps(pts, (resolution, resolution))
            if n_landmarks > 5:
                lm = np.concatenate([lm, template_landmarks((resolution, resolution), n_landmarks)[5:]])
            samples.append(
                Sample(img.astype(np.float32), lm, label, caption_for(CLASS_NAMES[label]), split,
                       lowlight=lowlight is not None)
            )
    names = list(CLASS_NAMES[:n_classes])
    manifest = DatasetManifest(
        names, {split: [n_per_class] * n_classes}, (resolution, resolution), n_landmarks, "synthetic",
        extra={"seed": seed, "source": "toy"},
    )
    return samples, manifest


def write_dataset(samples: Sequence[Sample], manifest: DatasetManifest, root: str | os.PathLike) -> None:
    """Write samples in the directory-per-class layout, landmarks as .npy."""
    root = Path(root)
    idx: dict[tuple[str, int], int] = {}
    for s in samples:
        name = manifest.class_names[s.label]
        n = idx.get((s.split, s.label), 0)
        idx[(s.split, s.label)] = n + 1
        stem = f"{name}_{n:05d}"
        d = root / s.split / name
        d.mkdir(parents=True, exist_ok=True)
        write_image(d / f"{stem}.png", s.image)
        ld = root / "landmarks" / s.split / name
        ld.mkdir(parents=True, exist_ok=True)
        np.save(ld / f"{stem}.npy", s.landmarks)
    m = DatasetManifest(manifest.class_names, manifest.counts, manifest.resolution, manifest.n_landmarks,
                        "files", manifest.extra)
    m.write(root / "manifest.json")


def stack_batch(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Images as N x 3 x H x W, landmarks N x K x H x W, labels N."""
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    landmarks = np.stack([s.landmarks for s in samples]).astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, landmarks, labels
