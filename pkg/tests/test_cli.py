"""Exit codes, output contracts, and bitwise reproducibility of the CLI."""

import json
import os
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from mvt import flops
from mvt.cli import RunManifest, build_dataset, main
from mvt.data import TEST_FILES, write_batch_file
from mvt.errors import ConfigError
from mvt.model import build_model, presets, save_checkpoint
from mvt.pgm import read_pgm


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# ------------------------------------------------------------ describe/flops

def test_describe_880m(capsys):
    code, out, _ = run(capsys, "describe", "--preset", "880M")
    assert code == 0
    assert "channel=300 depth=8 heads=12 mlp_ratio=4" in out
    assert "layout=49+16+1" in out


def test_describe_desk32(capsys):
    code, out, _ = run(capsys, "describe", "--preset", "desk-32")
    assert code == 0
    assert "tokens=5" in out


def test_describe_unknown_preset(capsys):
    code, _, err = run(capsys, "describe", "--preset", "kilo")
    assert code == 2
    assert "desk-32" in err  # the error lists what is available


def test_describe_needs_exactly_one_source(capsys):
    assert run(capsys, "describe")[0] == 2
    assert run(capsys, "describe", "--preset", "880M", "--config", "x.json")[0] == 2


def test_flops_structured_roundtrip(capsys):
    code, out, _ = run(capsys, "flops", "--preset", "610M", "--format", "structured")
    assert code == 0
    parsed = json.loads(out)
    report = flops.count(presets()["610M"])
    assert parsed["total_macs"] == report.total_macs
    assert parsed["total_params"] == report.total_params


def test_flops_table_and_ordering(capsys):
    code, out, _ = run(capsys, "flops", "--preset", "880M")
    assert code == 0
    assert out.splitlines()[0].split()[:2] == ["layer", "macs"]
    big = flops.count(presets()["880M"]).total_macs
    small = flops.count(presets()["610M"]).total_macs
    assert small < big


def test_flops_from_config_file(tmp_path, capsys):
    from mvt import configio
    path = str(tmp_path / "m.json")
    configio.save_json(path, presets()["desk-64"].to_dict())
    code, out, _ = run(capsys, "flops", "--config", path, "--format", "structured")
    assert code == 0
    assert json.loads(out)["total_macs"] == flops.count(presets()["desk-64"]).total_macs


# ------------------------------------------------------------------ gradcheck

def test_gradcheck_single_op(capsys):
    code, out, _ = run(capsys, "gradcheck", "--ops", "softmax")
    assert code == 0
    lines = [l for l in out.splitlines() if l]
    assert len(lines) == 1
    assert "softmax" in lines[0] and "PASS" in lines[0]


def test_gradcheck_corrupt_negative_control(capsys):
    code, out, err = run(capsys, "gradcheck", "--ops", "matmul", "--corrupt")
    assert code == 1
    assert "FAIL" in out
    assert "failed" in err


def test_gradcheck_guards(capsys):
    assert run(capsys, "gradcheck", "--preset", "880M")[0] == 2
    assert run(capsys, "gradcheck", "--ops", "bogus_op")[0] == 2


# ------------------------------------------------------------------ train/eval

def train_args(out_dir, **extra):
    base = ["train", "--preset", "desk-32", "--data", "two_gaussians",
            "--epochs", "1", "--train-size", "32", "--val-size", "16",
            "--lr", "1e-3", "--seed", "7", "--out", out_dir]
    for k, v in extra.items():
        base += [f"--{k.replace('_', '-')}", str(v)]
    return base


RUN_FILES = ("manifest.json", "history.jsonl", "best.ckpt", "best.ckpt.config.json")


def test_train_writes_run_files(tmp_path, capsys):
    out = str(tmp_path / "run")
    code, stdout, _ = run(capsys, *train_args(out))
    assert code == 0
    for name in RUN_FILES:
        assert os.path.isfile(os.path.join(out, name)), name
    assert "epoch=1" in stdout and "best checkpoint" in stdout
    manifest = RunManifest.from_dict(json.load(open(os.path.join(out, "manifest.json"))))
    assert manifest.subcommand == "train"
    assert manifest.seed == 7
    assert manifest.model["num_classes"] == 2
    assert manifest.data["kind"] == "two_gaussians"


def test_repeat_invocation_is_bitwise_identical(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert run(capsys, *train_args(out))[0] == 0
    first = {n: open(os.path.join(out, n), "rb").read() for n in RUN_FILES}
    assert run(capsys, *train_args(out))[0] == 0
    second = {n: open(os.path.join(out, n), "rb").read() for n in RUN_FILES}
    assert first == second


def test_manifest_replay_reproduces_results(tmp_path, capsys):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert run(capsys, *train_args(a))[0] == 0
    code, _, _ = run(capsys, "train", "--from-manifest",
                     os.path.join(a, "manifest.json"), "--out", b)
    assert code == 0
    for name in ("history.jsonl", "best.ckpt"):
        assert (open(os.path.join(a, name), "rb").read()
                == open(os.path.join(b, name), "rb").read()), name


def test_train_divergence_exit_code(tmp_path, capsys):
    out = str(tmp_path / "run")
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, *train_args(out, lr="1e12", weight_decay="0",
                                                train_size="16", batch="8"))
    assert code == 4
    assert "numerical abort" in err
    assert os.path.isfile(os.path.join(out, "best.ckpt"))


def fake_cifar_dir(tmp_path, n=1000):
    root = tmp_path / "cifar"
    root.mkdir()
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(10), n // 10)
    rng.shuffle(labels)
    images = rng.integers(0, 256, size=(n, 3, 32, 32)).astype(np.uint8)
    write_batch_file(str(root / TEST_FILES[0]), images, labels)
    return str(root)


def test_eval_fresh_model_sits_in_chance_band(tmp_path, capsys):
    root = fake_cifar_dir(tmp_path)
    ckpt = str(tmp_path / "fresh.ckpt")
    save_checkpoint(ckpt, build_model(presets()["desk-32"], seed=11))
    code, out, _ = run(capsys, "eval", "--checkpoint", ckpt, "--data", "cifar10",
                       "--data-dir", root, "--val-size", "1000")
    assert code == 0
    acc = float(out.split("top1=")[1].split()[0])
    # binomial chance band at p = 0.1 over 1000 balanced samples
    assert 0.02 <= acc <= 0.25
    assert "n=1000" in out


def test_eval_error_codes(tmp_path, capsys):
    assert run(capsys, "eval", "--checkpoint", str(tmp_path / "nope.ckpt"))[0] == 3
    ckpt = str(tmp_path / "k10.ckpt")
    save_checkpoint(ckpt, build_model(presets()["desk-32"], seed=1))
    # two_gaussians has 2 classes; the checkpoint expects 10
    assert run(capsys, "eval", "--checkpoint", ckpt, "--data", "two_gaussians")[0] == 2
    assert run(capsys, "eval", "--checkpoint", ckpt, "--data", "cifar10",
               "--data-dir", str(tmp_path / "missing"))[0] == 3


def test_eval_writes_metrics(tmp_path, capsys):
    root = fake_cifar_dir(tmp_path, n=100)
    ckpt = str(tmp_path / "fresh.ckpt")
    save_checkpoint(ckpt, build_model(presets()["desk-32"], seed=2))
    out_dir = str(tmp_path / "metrics")
    code, out, _ = run(capsys, "eval", "--checkpoint", ckpt, "--data", "cifar10",
                       "--data-dir", root, "--val-size", "100", "--out", out_dir)
    assert code == 0
    metrics = json.load(open(os.path.join(out_dir, "metrics.json")))
    assert metrics["n"] == 100
    assert f"top1={metrics['top1']:.4f}" in out


def test_build_dataset_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        build_dataset("mystery", 32, None, 4, 4, 0)


# ------------------------------------------------------------------ visualize

def test_visualize_three_branches_nine_files(tmp_path, capsys):
    ckpt = str(tmp_path / "d64.ckpt")
    save_checkpoint(ckpt, build_model(presets()["desk-64"], seed=3))
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    rng = np.random.default_rng(4)
    for name in ("one", "two", "three"):
        np.save(str(imgs / f"{name}.npy"), rng.uniform(size=(3, 64, 64)))
    out = str(tmp_path / "heat")
    code, stdout, _ = run(capsys, "visualize", "--checkpoint", ckpt,
                          "--images", str(imgs), "--out", out)
    assert code == 0
    files = sorted(os.listdir(out))
    assert len(files) == 9
    assert files[0] == "one.branch0.pgm"
    # fresh adaptive merge weights are uniform -> every heatmap is mid-gray
    for name in files:
        grid = read_pgm(os.path.join(out, name))
        assert np.all(grid == 128), name
    assert len(stdout.splitlines()) == 9


def test_visualize_requires_apm(tmp_path, capsys):
    ckpt = str(tmp_path / "avg.ckpt")
    cfg = replace(presets()["desk-32"], merge="avg_pool")
    save_checkpoint(ckpt, build_model(cfg, seed=5))
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    np.save(str(imgs / "x.npy"), np.zeros((3, 32, 32)))
    code, _, err = run(capsys, "visualize", "--checkpoint", ckpt,
                       "--images", str(imgs), "--out", str(tmp_path / "o"))
    assert code == 2
    assert "apm" in err


def test_visualize_empty_dir_is_io_error(tmp_path, capsys):
    ckpt = str(tmp_path / "d32.ckpt")
    save_checkpoint(ckpt, build_model(presets()["desk-32"], seed=6))
    empty = tmp_path / "none"
    empty.mkdir()
    code, _, _ = run(capsys, "visualize", "--checkpoint", ckpt,
                     "--images", str(empty), "--out", str(tmp_path / "o"))
    assert code == 3


def test_visualize_deterministic_outputs(tmp_path, capsys):
    ckpt = str(tmp_path / "d32.ckpt")
    save_checkpoint(ckpt, build_model(presets()["desk-32"], seed=7))
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    np.save(str(imgs / "x.npy"), np.random.default_rng(8).uniform(size=(3, 32, 32)))
    out = str(tmp_path / "heat")
    assert run(capsys, "visualize", "--checkpoint", ckpt, "--images", str(imgs),
               "--out", out, "--scale", "4")[0] == 0
    first = {n: open(os.path.join(out, n), "rb").read() for n in os.listdir(out)}
    assert run(capsys, "visualize", "--checkpoint", ckpt, "--images", str(imgs),
               "--out", out, "--scale", "4")[0] == 0
    second = {n: open(os.path.join(out, n), "rb").read() for n in os.listdir(out)}
    assert first == second


# ----------------------------------------------------------------- module run

def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mvt", "describe",
                           "--preset", "desk-32"],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0
    assert "tokens=5" in proc.stdout
