"""Command-line entry point: ``lldif <subcommand> [options]``.

Settings resolve as CLI flag > ``--config`` file > built-in default. The
config file is a flat mapping (YAML or JSON) whose keys are the long option
names with dashes replaced by underscores, plus any model field (for example
``epd_dim``). ``LLDIF_OUTPUT_ROOT`` relocates relative output paths and the
``runs.jsonl`` run log.
"""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from .config import ConfigError, ModelConfig, PROFILES, TrainConfig

logger = logging.getLogger("lldif")

SUBCOMMANDS = (
    "degrade", "synth-toy", "train-stage1", "train-stage2", "eval", "ablate", "sweep-T", "export-emb", "plot",
)

# option name -> (type, default); shared by the training-style subcommands
TRAIN_OPTIONS: dict[str, tuple[type, Any]] = {
    "profile": (str, "desk"),
    "epochs": (int, None),
    "batch_size": (int, None),
    "lr": (float, None),
    "weight_decay": (float, None),
    "max_steps": (int, None),
    "lr_schedule": (str, None),
    "T": (int, None),
    "variant": (str, None),
    "loss": (str, None),
    "insert_noise": (bool, None),
    "use_diffusion": (bool, None),
}
MODEL_KEYS = {f.name: type(f.default) for f in dataclasses.fields(ModelConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 2 like argparse, via UsageError
        raise UsageError(f"{self.prog}: {message}")


def output_root() -> Path:
    return Path(os.environ.get("LLDIF_OUTPUT_ROOT", "."))


def resolve_out(p: Optional[str]) -> Optional[Path]:
    if p is None:
        return None
    path = Path(p)
    return path if path.is_absolute() else output_root() / path


def git_hash(paths: Sequence[Optional[str]]) -> str:
    """Git-style blob hash over the given files (directories hashed recursively)."""
    h = hashlib.sha1()
    for p in paths:
        if not p:
            continue
        path = Path(p)
        files = sorted(f for f in path.rglob("*") if f.is_file()) if path.is_dir() else [path]
        for f in files:
            if not f.exists():
                continue
            data = f.read_bytes()
            blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
            h.update(f"{f.relative_to(path) if path.is_dir() else f.name}:{blob}\n".encode())
    return h.hexdigest()


def load_config_file(path: Optional[str]) -> dict[str, Any]:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"config file {path} is not valid YAML/JSON: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise UsageError(f"config file {path} must be a flat key-value mapping")
    return data


def _coerce(key: str, value: Any, typ: type) -> Any:
    if typ is bool:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key!r}: expected a boolean, got {value!r}")
    try:
        if typ is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return typ(value)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key!r}: expected {typ.__name__}, got {value!r}") from None


def resolve_train_config(args: argparse.Namespace, file_cfg: dict[str, Any], stage: int) -> TrainConfig:
    """Merge CLI flags, config file and profile defaults into a TrainConfig."""
    allowed = set(TRAIN_OPTIONS) | set(MODEL_KEYS) | {"seed", "n_classes"}
    for key in file_cfg:
        if key not in allowed and key not in COMMON_FILE_KEYS:
            raise UsageError(f"unknown config key: {key!r}")
    values: dict[str, Any] = {}
    for key, (typ, default) in TRAIN_OPTIONS.items():
        cli = getattr(args, key, None)
        if cli is not None:
            values[key] = cli
        elif key in file_cfg:
            values[key] = _coerce(key, file_cfg[key], typ)
        elif default is not None:
            values[key] = default
    seed = args.seed if args.seed is not None else _coerce("seed", file_cfg.get("seed", 0), int)
    profile = values.pop("profile")
    if profile not in PROFILES:
        raise UsageError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    n_classes = getattr(args, "n_classes", None) or _coerce("n_classes", file_cfg.get("n_classes", 7), int)
    try:
        cfg = PROFILES[profile](n_classes, stage=stage, seed=seed)
        model_over = {}
        for key, typ in MODEL_KEYS.items():
            if key in file_cfg and key not in ("n_classes", "class_names", "T", "variant"):
                v = file_cfg[key]
                if typ is tuple:
                    if not isinstance(v, (list, tuple)):
                        raise UsageError(f"config key {key!r}: expected a list, got {v!r}")
                    model_over[key] = tuple(_coerce(key, c, int) for c in v)
                else:
                    model_over[key] = _coerce(key, v, typ)
        model = cfg.model.replace(**model_over) if model_over else cfg.model
        return cfg.replace(model=model, **values)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from None


COMMON_FILE_KEYS = {"data", "split", "out"}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default 0); reruns with the same seed are identical")
    p.add_argument("--config", default=None, help="flat YAML/JSON config file")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=sorted(PROFILES), default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=["constant", "cosine"])
    p.add_argument("--log", help="JSON-lines training log")


def _add_stage2(p: argparse.ArgumentParser) -> None:
    p.add_argument("--T", type=int, help="diffusion steps (default 4)")
    p.add_argument("--variant", choices=["paper", "ddpm_bar"])
    p.add_argument("--loss", choices=["ce", "total"])
    p.add_argument("--insert-noise", dest="insert_noise", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--diffusion", dest="use_diffusion", action=argparse.BooleanOptionalAction, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lldif", description="Low-light FER with diffusion over an embedding prior.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)

    p = sub.add_parser("degrade", help="synthesize low-light twins of a dataset (deterministic per image)")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--ev", type=float, default=-2.0)
    p.add_argument("--wb", default="1.0,0.95,0.85", help="R,G,B gains")
    p.add_argument("--highlights", type=float, default=-0.3)
    p.add_argument("--shadows", type=float, default=-0.3)
    p.add_argument("--jitter", type=float, default=0.0, help="per-image EV jitter in stops")
    p.add_argument("--workers", type=int, default=1)
    _add_common(p)

    p = sub.add_parser("synth-toy", help="write the procedural toy dataset (bit-identical per seed)")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", dest="per_class", type=int, default=32)
    p.add_argument("--test-per-class", dest="test_per_class", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--clear", action="store_true", help="skip the low-light transform")
    _add_common(p)

    p = sub.add_parser("train-stage1", help="train LA-CLIP, PNET_s1 and the LLformer (deterministic per seed)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("train-stage2", help="train PNET_s2, denoiser and LLformer (deterministic per seed)")
    p.add_argument("--data", required=True)
    p.add_argument("--s1-ckpt", dest="s1_ckpt", required=True)
    p.add_argument("--out", required=True)
    _add_train(p)
    _add_stage2(p)
    _add_common(p)

    p = sub.add_parser("eval", help="accuracy/confidence report (seed fixes chain start noise)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--T", type=int)
    p.add_argument("--out", required=True, help="report JSON")
    _add_common(p)

    p = sub.add_parser("ablate", help="train and score the four stage-2 ablation variants")
    p.add_argument("--data", required=True)
    p.add_argument("--s1-ckpt", dest="s1_ckpt", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    _add_train(p)
    _add_stage2(p)
    _add_common(p)

    p = sub.add_parser("sweep-T", help="accuracy per number of diffusion steps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--T-list", dest="T_list", default="1,2,3,4,6,10,20,32")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--retrain", action="store_true", help="train a stage-2 model per T (needs --s1-ckpt)")
    p.add_argument("--s1-ckpt", dest="s1_ckpt")
    p.add_argument("--out", required=True, help="output directory")
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("export-emb", help="export EPD or penultimate embeddings for external projection")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layer", choices=["epd", "penultimate"], default="epd")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--T", type=int)
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)

    p = sub.add_parser("plot", help="render a figure from emitted JSON (batch, static PNG)")
    p.add_argument("--input", required=True)
    p.add_argument("--kind", choices=["hist", "curve", "confidence", "sweep"], required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    return parser


def _load_split(data: str, split: str, resolution: Optional[int] = None):
    from .data import load_dataset

    samples, manifest = load_dataset(data, resolution)
    if split != "all":
        chosen = [s for s in samples if s.split == split]
        if not chosen:
            logger.warning("split %r is empty in %s; using all samples", split, data)
            chosen = samples
        samples = chosen
    return samples, manifest


def _train_samples(data: str, resolution: int):
    samples, manifest = _load_split(data, "train", resolution)
    return samples, manifest


def cmd_degrade(args, file_cfg) -> dict:
    from .degrade import DegradeParams, degrade_dataset, histogram, read_image

    try:
        wb = tuple(float(v) for v in args.wb.split(","))
    except ValueError:
        raise UsageError(f"--wb expects R,G,B floats, got {args.wb!r}") from None
    params = DegradeParams(args.ev, wb, args.highlights, args.shadows, args.seed or 0)
    dst = resolve_out(args.dst)
    manifest = degrade_dataset(args.src, dst, params, args.jitter, args.workers)
    hists = {"src": None, "dst": None}
    for key, paths in (("src", [e.src for e in manifest.ok]), ("dst", [dst / e.dst for e in manifest.ok])):
        bins, means = None, []
        for p in paths:
            h = histogram(read_image(p))
            bins = h.bins if bins is None else bins + h.bins
            means.append(h.mean_intensity)
        if bins is not None:
            hists[key] = {"bins": bins.tolist(), "mean_intensity": float(sum(means) / len(means))}
    (dst / "histograms.json").write_text(json.dumps(hists, sort_keys=True))
    logger.info("degraded %d images (%d skipped)", len(manifest.ok), len(manifest.skipped))
    return {"outputs": [str(dst / "manifest.jsonl"), str(dst / "histograms.json")], "ok": len(manifest.ok),
            "skipped": len(manifest.skipped)}


def cmd_synth_toy(args, file_cfg) -> dict:
    from .data import synth_toy_dataset, write_dataset
    from .degrade import DegradeParams

    seed = args.seed or 0
    lowlight = None if args.clear else DegradeParams()
    samples, manifest = synth_toy_dataset(args.classes, args.per_class, args.resolution, seed, lowlight=lowlight)
    if args.test_per_class:
        test, tm = synth_toy_dataset(args.classes, args.test_per_class, args.resolution, seed + 1,
                                     lowlight=lowlight, split="test")
        samples += test
        manifest.counts.update(tm.counts)
    out = resolve_out(args.out)
    write_dataset(samples, manifest, out)
    return {"outputs": [str(out)], "n": len(samples)}


def cmd_train_stage1(args, file_cfg) -> dict:
    from .training import train_stage1

    cfg = resolve_train_config(args, file_cfg, stage=1)
    samples, manifest = _train_samples(args.data, cfg.model.image_size)
    cfg = cfg.replace(model=cfg.model.replace(n_classes=len(manifest.class_names),
                                              class_names=tuple(manifest.class_names)))
    out = resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res = train_stage1(cfg, samples, resolve_out(args.log), out)
    return {"outputs": [str(out)], "config": cfg.to_dict(), "final_loss": res.history[-1]["loss"]}


def cmd_train_stage2(args, file_cfg) -> dict:
    from .checkpoint import load_checkpoint
    from .training import train_stage2

    s1 = load_checkpoint(args.s1_ckpt)
    cfg = resolve_train_config(args, file_cfg, stage=2)
    cfg = cfg.replace(model=ModelConfig.from_dict(s1.config))
    samples, _ = _train_samples(args.data, cfg.model.image_size)
    out = resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res = train_stage2(cfg, samples, s1, resolve_out(args.log), out)
    return {"outputs": [str(out)], "config": cfg.to_dict(), "final_loss": res.history[-1]["loss"]}


def cmd_eval(args, file_cfg) -> dict:
    from .checkpoint import load_checkpoint
    from .evaluation import evaluate

    ckpt = load_checkpoint(args.ckpt)
    cfg = ModelConfig.from_dict(ckpt.config)
    samples, manifest = _load_split(args.data, args.split, cfg.image_size)
    if len(manifest.class_names) > cfg.n_classes:
        raise ValueError(f"dataset has {len(manifest.class_names)} classes, checkpoint {cfg.n_classes}")
    report = evaluate(ckpt, samples, T=args.T, seed=args.seed or 0)
    out = resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    print(report.table(manifest.class_names))
    return {"outputs": [str(out)], "accuracy": report.accuracy}


def cmd_ablate(args, file_cfg) -> dict:
    from .checkpoint import load_checkpoint
    from .evaluation import ablation_run

    s1 = load_checkpoint(args.s1_ckpt)
    cfg = resolve_train_config(args, file_cfg, stage=2).replace(model=ModelConfig.from_dict(s1.config))
    train, _ = _train_samples(args.data, cfg.model.image_size)
    evals, _ = _load_split(args.data, args.split, cfg.model.image_size)
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = ablation_run(cfg, train, s1, evals, out)
    grid.write(out / "ablation.json")
    (out / "ablation.txt").write_text(grid.table() + "\n")
    print(grid.table())
    return {"outputs": [str(out / "ablation.json"), str(out / "ablation.txt")]}


def cmd_sweep(args, file_cfg) -> dict:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .evaluation import iteration_sweep

    try:
        t_list = [int(t) for t in args.T_list.split(",")]
    except ValueError:
        raise UsageError(f"--T-list expects comma-separated integers, got {args.T_list!r}") from None
    if any(t <= 0 for t in t_list):
        raise UsageError("--T-list values must be positive")
    if args.retrain and not args.s1_ckpt:
        raise UsageError("--retrain requires --s1-ckpt")
    ckpt = load_checkpoint(args.ckpt)
    cfg = ModelConfig.from_dict(ckpt.config)
    samples, _ = _load_split(args.data, args.split, cfg.image_size)
    kw = {}
    if args.retrain:
        s1 = load_checkpoint(args.s1_ckpt)
        kw = dict(retrain=True, train_samples=_train_samples(args.data, cfg.image_size)[0], s1_checkpoint=s1,
                  base_cfg=resolve_train_config(args, file_cfg, 2).replace(model=ModelConfig.from_dict(s1.config)))
    res = iteration_sweep(ckpt, samples, t_list, seed=args.seed or 0, **kw)
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.write(out / "sweep.json")
    (out / "timings.json").write_text(json.dumps(res.timings(), indent=2, sort_keys=True))
    for T, epd in res.epd.items():
        np.save(out / f"epd_T{T}.npy", epd)
    for r in res.rows:
        print(f"T={r.T:<3d} accuracy={r.accuracy:.4f}")
    return {"outputs": [str(out / "sweep.json"), str(out / "timings.json")]}


def cmd_export(args, file_cfg) -> dict:
    from .checkpoint import load_checkpoint
    from .evaluation import export_embeddings

    ckpt = load_checkpoint(args.ckpt)
    cfg = ModelConfig.from_dict(ckpt.config)
    samples, _ = _load_split(args.data, args.split, cfg.image_size)
    out = resolve_out(args.out)
    header = export_embeddings(ckpt, samples, out, args.layer, seed=args.seed or 0, T=args.T)
    return {"outputs": [str(out / header[k]["file"]) for k in ("embeddings", "labels", "lowlight")]}


def cmd_plot(args, file_cfg) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    path = Path(args.input)
    if not path.exists():
        raise FileNotFoundError(f"no such input: {path}")
    fig, ax = plt.subplots(figsize=(6, 4))
    if args.kind == "curve":
        recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        keys = [k for k in recs[0] if k not in ("step", "epoch", "lr")]
        for k in keys:
            ax.plot([r["step"] for r in recs], [r[k] for r in recs], label=k)
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend()
    else:
        data = json.loads(path.read_text())
        if args.kind == "hist":
            x = (np.arange(256) + 0.5) / 256
            for key in ("src", "dst"):
                if data.get(key):
                    ax.plot(x, data[key]["bins"], label=f"{key} (mean {data[key]['mean_intensity']:.3f})")
            ax.set_xlabel("intensity")
            ax.legend()
        elif args.kind == "confidence":
            conf = np.array(data["confidences"])
            low = np.array(data["lowlight"], bool)
            for name, mask in (("clear", ~low), ("low-light", low)):
                if mask.any():
                    ax.hist(conf[mask], bins=20, range=(0, 1), alpha=0.6, label=name)
            ax.set_xlabel("confidence")
            ax.set_title(f"accuracy {data['accuracy']:.3f}")
            ax.legend()
        else:
            rows = data["rows"]
            ax.plot([r["T"] for r in rows], [r["accuracy"] for r in rows], marker="o")
            ax.set_xlabel("T")
            ax.set_ylabel("accuracy")
    out = resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return {"outputs": [str(out)]}


HANDLERS = {
    "degrade": cmd_degrade,
    "synth-toy": cmd_synth_toy,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-T": cmd_sweep,
    "export-emb": cmd_export,
    "plot": cmd_plot,
}


def _inputs(args: argparse.Namespace) -> list[Optional[str]]:
    return [getattr(args, k, None) for k in ("src", "data", "ckpt", "s1_ckpt", "input", "config")]


def append_run_record(rec: dict) -> None:
    root = output_root()
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "runs.jsonl", "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
        close = difflib.get_close_matches(argv[0], SUBCOMMANDS, n=1)
        hint = f"; did you mean {close[0]!r}?" if close else ""
        print(f"lldif: unknown subcommand {argv[0]!r}{hint}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not args.command:
        parser.print_help()
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")

    import torch

    torch.manual_seed(args.seed or 0)
    started = time.time()
    try:
        file_cfg = load_config_file(args.config)
        result = HANDLERS[args.command](args, file_cfg)
    except UsageError as exc:
        print(f"lldif {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__, "command": args.command}), file=sys.stderr)
        return 1
    append_run_record({
        "subcommand": args.command,
        "config": {k: v for k, v in vars(args).items() if k != "command"},
        "resolved": result.pop("config", None),
        "seed": args.seed or 0,
        "input_hash": git_hash(_inputs(args)),
        "outputs": result.pop("outputs", []),
        "summary": result,
        "started": started,
        "finished": time.time(),
    })
    return 0


if __name__ == "__main__":
    sys.exit(main())
