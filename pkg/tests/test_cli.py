import argparse
import json

import pytest

from lldif.cli import UsageError, build_parser, main, resolve_train_config


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv("LLDIF_OUTPUT_ROOT", str(tmp_path / "out"))
    monkeypatch.chdir(tmp_path)
    return tmp_path / "out"


def records(root):
    return [json.loads(line) for line in (root / "runs.jsonl").read_text().splitlines()]


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "train-stage2" in capsys.readouterr().out
    assert main(["eval", "--help"]) == 0


def test_unknown_subcommand_suggests(capsys):
    assert main(["evl"]) == 2
    assert "'eval'" in capsys.readouterr().err


def test_missing_s1_ckpt_named(capsys):
    assert main(["train-stage2", "--data", "d", "--out", "o.npz"]) == 2
    assert "--s1-ckpt" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert main(["synth-toy", "--out", "x", "--colour", "red"]) == 2
    assert "--colour" in capsys.readouterr().err


def _args(argv):
    return build_parser().parse_args(["train-stage1", "--data", "d", "--out", "o"] + argv)


@pytest.mark.parametrize(
    "cli, file_cfg, expected",
    [
        ([], {}, 1e-3),  # desk default
        ([], {"lr": 0.02}, 0.02),  # file over default
        (["--lr", "0.5"], {"lr": 0.02}, 0.5),  # flag over file
        (["--lr", "0.5"], {}, 0.5),  # flag over default
    ],
)
def test_precedence_lr(cli, file_cfg, expected):
    assert resolve_train_config(_args(cli), file_cfg, 1).lr == expected


@pytest.mark.parametrize(
    "cli, file_cfg, expected",
    [([], {}, 75), ([], {"epochs": 3}, 3), (["--epochs", "9"], {"epochs": 3}, 9)],
)
def test_precedence_epochs(cli, file_cfg, expected):
    assert resolve_train_config(_args(cli), file_cfg, 1).epochs == expected


def test_precedence_seed_and_model_keys():
    cfg = resolve_train_config(_args(["--seed", "4"]), {"seed": 2, "epd_dim": 16, "channels": [4, 8, 16]}, 1)
    assert cfg.seed == 4 and cfg.model.epd_dim == 16 and cfg.model.channels == (4, 8, 16)
    assert resolve_train_config(_args([]), {"seed": 2}, 1).seed == 2


def test_config_errors_name_the_key():
    with pytest.raises(UsageError, match="bogus"):
        resolve_train_config(_args([]), {"bogus": 1}, 1)
    with pytest.raises(UsageError, match="epochs"):
        resolve_train_config(_args([]), {"epochs": "many"}, 1)


def test_bad_config_file_exit_code(root, tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("bogus_key: 3\n")
    assert main(["train-stage1", "--data", "d", "--out", "o.npz", "--config", str(tmp_path / "c.yaml")]) == 2
    assert "bogus_key" in capsys.readouterr().err


def test_missing_file_structured_error(root, capsys):
    assert main(["eval", "--ckpt", "nope.npz", "--data", "d", "--out", "r.json"]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["command"] == "eval" and "nope.npz" in err["error"]


def test_full_pipeline_records_and_determinism(root):
    assert main(["synth-toy", "--out", "toy", "--classes", "2", "--per-class", "4", "--test-per-class", "2",
                 "--resolution", "16", "--seed", "5"]) == 0
    assert main(["synth-toy", "--out", "toy2", "--classes", "2", "--per-class", "4", "--test-per-class", "2",
                 "--resolution", "16", "--seed", "5"]) == 0
    for f in sorted((root / "toy").rglob("*.png")):
        assert f.read_bytes() == (root / "toy2" / f.relative_to(root / "toy")).read_bytes()

    data = str(root / "toy")
    assert main(["degrade", "--src", data, "--dst", "ll", "--ev", "-1"]) == 0
    hist = json.loads((root / "ll" / "histograms.json").read_text())
    assert hist["dst"]["mean_intensity"] < hist["src"]["mean_intensity"]

    common = ["--max-steps", "2", "--batch-size", "4", "--seed", "1"]
    for tag in ("a", "b"):
        assert main(["train-stage1", "--data", data, "--out", f"s1{tag}.npz", "--log", f"s1{tag}.log"] + common) == 0
        assert main(["train-stage2", "--data", data, "--s1-ckpt", str(root / "s1a.npz"), "--out", f"s2{tag}.npz",
                     "--log", f"s2{tag}.log", "--T", "2"] + common) == 0
    for stage in ("s1", "s2"):
        a = [json.loads(x) for x in (root / f"{stage}a.log").read_text().splitlines()]
        b = [json.loads(x) for x in (root / f"{stage}b.log").read_text().splitlines()]
        assert all(abs(x["loss"] - y["loss"]) <= 1e-5 for x, y in zip(a, b)) and len(a) == len(b) == 2

    s2 = str(root / "s2a.npz")
    assert main(["eval", "--ckpt", s2, "--data", data, "--out", "rep.json", "--seed", "3"]) == 0
    assert main(["eval", "--ckpt", s2, "--data", data, "--out", "rep2.json", "--seed", "3"]) == 0
    assert (root / "rep.json").read_bytes() == (root / "rep2.json").read_bytes()
    for tag in ("e1", "e2"):
        assert main(["export-emb", "--ckpt", s2, "--data", data, "--out", tag, "--seed", "3"]) == 0
    for f in ("embeddings.bin", "labels.bin", "lowlight.bin"):
        assert (root / "e1" / f).read_bytes() == (root / "e2" / f).read_bytes()
    assert main(["sweep-T", "--ckpt", s2, "--data", data, "--T-list", "1,2", "--out", "sw"]) == 0
    assert [r["T"] for r in json.loads((root / "sw" / "sweep.json").read_text())["rows"]] == [1, 2]
    assert main(["sweep-T", "--ckpt", s2, "--data", data, "--T-list", "0", "--out", "sw"]) == 2

    for kind, src in (("hist", root / "ll" / "histograms.json"), ("curve", root / "s2a.log"),
                      ("confidence", root / "rep.json"), ("sweep", root / "sw" / "sweep.json")):
        assert main(["plot", "--input", str(src), "--kind", kind, "--out", f"{kind}.png"]) == 0
        assert (root / f"{kind}.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    recs = records(root)
    assert len(recs) == 16  # one per successful run; the rejected sweep adds none
    r = recs[2]
    assert r["subcommand"] == "degrade" and len(r["input_hash"]) == 40 and r["outputs"]
    assert recs[3]["resolved"]["max_steps"] == 2
    assert recs[3]["input_hash"] == recs[5]["input_hash"]


def test_ablate_subcommand(root):
    assert main(["synth-toy", "--out", "toy", "--classes", "2", "--per-class", "4", "--resolution", "16"]) == 0
    data = str(root / "toy")
    assert main(["train-stage1", "--data", data, "--out", "s1.npz", "--max-steps", "1", "--batch-size", "4"]) == 0
    assert main(["ablate", "--data", data, "--s1-ckpt", str(root / "s1.npz"), "--out", "abl", "--max-steps", "1",
                 "--batch-size", "4"]) == 0
    grid = json.loads((root / "abl" / "ablation.json").read_text())
    assert [r["variant"] for r in grid["rows"]] == ["V1", "V2", "V3", "V4"]
