"""Low-light synthesis and brightness histograms.

The transform is an open stand-in for the photo-editor adjustments used to
build low-light FER benchmarks. Four stages run in a fixed order on linear
[0, 1] intensities:

1. exposure      ``y = x * 2**ev``
2. white balance ``y = x * gain[channel]``
3. highlights    ``y = x + w_hi(x) * (h / 2) * (x - 0.75)``,
                 ``w_hi = smoothstep(0.75, 1.0, x)``
4. shadows       ``y = x + w_lo(x) * (s / 2) * x``,
                 ``w_lo = 1 - smoothstep(0.0, 0.25, x)``

Stages 3 and 4 blend a linear compression of the top / bottom quartile
(slope ``1 + h/2`` resp. ``1 + s/2``, i.e. down to 0.5 at strength -1) into
the identity with a smoothstep weight. Both curves are monotone, never
brighten, and keep 0 fixed. The result is clipped to [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

N_BINS = 256
IMAGE_EXTS = (".png", ".jpg", ".jpeg")


class DegradeError(ValueError):
    pass


@dataclass(frozen=True)
class DegradeParams:
    exposure_ev: float = -2.0
    white_balance_shift: tuple[float, float, float] = (1.0, 0.95, 0.85)
    highlights: float = -0.3
    shadows: float = -0.3
    seed: int = 0

    def __post_init__(self) -> None:
        wb = tuple(float(v) for v in self.white_balance_shift)
        object.__setattr__(self, "white_balance_shift", wb)
        if not np.isfinite(self.exposure_ev) or self.exposure_ev > 0:
            raise DegradeError(f"exposure_ev must be <= 0 for low-light synthesis, got {self.exposure_ev}")
        if len(wb) != 3 or not all(np.isfinite(v) and v > 0 for v in wb):
            raise DegradeError(f"white_balance_shift needs 3 positive gains, got {wb}")
        for name in ("highlights", "shadows"):
            v = getattr(self, name)
            if not -1.0 <= v <= 0.0:
                raise DegradeError(f"{name} must lie in [-1, 0], got {v}")

    @classmethod
    def neutral(cls, seed: int = 0) -> "DegradeParams":
        return cls(0.0, (1.0, 1.0, 1.0), 0.0, 0.0, seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["white_balance_shift"] = list(self.white_balance_shift)
        return d


@dataclass
class Histogram:
    bins: np.ndarray
    mean_intensity: float

    @property
    def total(self) -> int:
        return int(self.bins.sum())

    def to_dict(self) -> dict:
        return {"bins": self.bins.tolist(), "mean_intensity": self.mean_intensity}


def smoothstep(e0: float, e1: float, x: np.ndarray) -> np.ndarray:
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.size == 0:
        raise DegradeError("empty image")
    if not np.all(np.isfinite(image)):
        raise DegradeError("image contains non-finite values")
    return image


def apply_lowlight(image: np.ndarray, params: DegradeParams) -> np.ndarray:
    """Darken an HxWx3 image in [0, 1] with the four-stage tone pipeline."""
    image = _check_image(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise DegradeError(f"expected HxWx3 image, got shape {image.shape}")
    if image.min() < 0 or image.max() > 1:
        raise DegradeError("image values must lie in [0, 1]")
    x = image.astype(np.float64, copy=True)

    if params.exposure_ev != 0.0:
        x *= 2.0**params.exposure_ev
    gains = np.asarray(params.white_balance_shift)
    if np.any(gains != 1.0):
        x *= gains
    if params.highlights != 0.0:
        x = x + smoothstep(0.75, 1.0, x) * (params.highlights / 2.0) * (x - 0.75)
    if params.shadows != 0.0:
        x = x + (1.0 - smoothstep(0.0, 0.25, x)) * (params.shadows / 2.0) * x
    np.clip(x, 0.0, 1.0, out=x)
    return x.astype(image.dtype) if np.issubdtype(image.dtype, np.floating) else x


def histogram(image: np.ndarray) -> Histogram:
    """Per-pixel intensity histogram (channel mean) over 256 bins of [0, 1]."""
    image = _check_image(image).astype(np.float64)
    intensity = image.mean(axis=-1) if image.ndim == 3 else image
    idx = np.minimum((intensity * N_BINS).astype(np.int64), N_BINS - 1)
    idx = np.maximum(idx, 0)
    bins = np.bincount(idx.ravel(), minlength=N_BINS)
    return Histogram(bins=bins, mean_intensity=float(image.mean()))


def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def image_seed(seed: int, rel_path: str) -> int:
    h = hashlib.sha256(f"{seed}:{rel_path}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def jittered_params(params: DegradeParams, rel_path: str, jitter: float) -> DegradeParams:
    """Per-image parameters, a pure function of (params, path, jitter)."""
    if jitter <= 0:
        return params
    rng = np.random.default_rng(image_seed(params.seed, rel_path))
    ev = min(0.0, params.exposure_ev + rng.uniform(-jitter, jitter))
    wb = tuple(max(1e-3, g * (1.0 + rng.uniform(-jitter, jitter) * 0.1)) for g in params.white_balance_shift)
    return replace(params, exposure_ev=ev, white_balance_shift=wb)


@dataclass
class ManifestEntry:
    src: str
    dst: Optional[str]  # relative to the destination root, so manifests do not depend on where output lives
    params: dict
    status: str = "ok"
    error: Optional[str] = None


@dataclass
class DegradeManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def ok(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.status == "ok"]

    @property
    def skipped(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.status == "skipped"]

    def write_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")


def _degrade_one(src: Path, dst: Path, rel: str, params: DegradeParams, jitter: float) -> ManifestEntry:
    p = jittered_params(params, rel, jitter)
    try:
        img = read_image(src)
        out = apply_lowlight(img, p)
    except Exception as exc:  # unreadable or invalid file is recorded, not fatal
        logger.warning("skipping %s: %s", src, exc)
        return ManifestEntry(str(src), None, p.to_dict(), "skipped", f"{type(exc).__name__}: {exc}")
    dst.parent.mkdir(parents=True, exist_ok=True)
    write_image(dst, out)
    return ManifestEntry(str(src), Path(rel).with_suffix(".png").as_posix(), p.to_dict())


def degrade_dataset(
    src_dir: str | os.PathLike,
    dst_dir: str | os.PathLike,
    params: DegradeParams,
    jitter: float = 0.0,
    workers: int = 1,
) -> DegradeManifest:
    """Write a degraded PNG twin of every image under ``src_dir``.

    Non-image files (landmark arrays, manifests) are copied unchanged so the
    labelled layout survives. Output is independent of ``workers``.
    """
    src_dir, dst_dir = Path(src_dir), Path(dst_dir)
    files = sorted(p for p in src_dir.rglob("*") if p.is_file())
    images = [p for p in files if p.suffix.lower() in IMAGE_EXTS and "landmarks" not in p.relative_to(src_dir).parts]
    if not images:
        raise DegradeError(f"no images found under {src_dir}")
    dst_dir.mkdir(parents=True, exist_ok=True)

    for p in files:
        if p in images or p.name in ("manifest.jsonl", "manifest.json"):
            continue
        target = dst_dir / p.relative_to(src_dir)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(p.read_bytes())

    jobs = []
    for p in images:
        rel = p.relative_to(src_dir).as_posix()
        jobs.append((p, (dst_dir / rel).with_suffix(".png"), rel, params, jitter))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            entries = list(ex.map(lambda a: _degrade_one(*a), jobs))
    else:
        entries = [_degrade_one(*a) for a in jobs]
    manifest = DegradeManifest(entries)
    manifest.write_jsonl(dst_dir / "manifest.jsonl")
    return manifest
