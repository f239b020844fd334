"""Named-array checkpoints (``.npz``) with an embedded JSON header."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch
import torch.nn as nn

META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: int
    config: dict[str, Any]
    fingerprint: str
    arrays: dict[str, np.ndarray]
    extra: dict[str, Any] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}

    def groups(self) -> set[str]:
        return {k.split("/", 1)[0] for k in self.arrays}


def module_arrays(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module(module: nn.Module, arrays: dict[str, np.ndarray], name: str) -> None:
    if not arrays:
        raise CheckpointError(f"checkpoint has no arrays for {name!r}")
    ref = module.state_dict()
    state = {}
    for k, v in ref.items():
        if k not in arrays:
            raise CheckpointError(f"checkpoint missing {name}/{k}")
        if tuple(arrays[k].shape) != tuple(v.shape):
            raise CheckpointError(f"{name}/{k}: shape {arrays[k].shape} != {tuple(v.shape)}")
        state[k] = torch.from_numpy(np.asarray(arrays[k])).to(v.dtype)
    module.load_state_dict(state)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    meta = {"stage": ckpt.stage, "config": ckpt.config, "fingerprint": ckpt.fingerprint, "extra": ckpt.extra}
    if META_KEY in ckpt.arrays:
        raise CheckpointError(f"array name {META_KEY!r} is reserved")
    with open(path, "wb") as fh:
        np.savez(fh, **{META_KEY: np.array(json.dumps(meta, sort_keys=True))}, **ckpt.arrays)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z[META_KEY]))
            arrays = {k: z[k] for k in z.files if k != META_KEY}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return Checkpoint(meta["stage"], meta["config"], meta["fingerprint"], arrays, meta.get("extra", {}))
