import os
import subprocess
import sys

import numpy as np
import pytest

from bcednet import modelio
from bcednet.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main, resolve_config
from bcednet.netgraph import build, default_config, forward, predict_labels, randomize_bn, small_config
from bcednet.pgm import read_pgm, write_pgm
from bcednet.textgen import load_dataset


def _tree(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["render", "--count", "6", "--seed", "7", "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def model_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "m.bced"
    modelio.save(randomize_bn(build(small_config(16, 2), 3), 4), path)
    return path


def test_render_writes_pairs_and_manifest(dataset, capsys):
    names = sorted(p.name for p in dataset.iterdir())
    assert names == sorted([f"{i:06d}.pgm" for i in range(6)] + [f"{i:06d}.lbl" for i in range(6)] + ["manifest.txt"])
    assert "count 6" in (dataset / "manifest.txt").read_text() or "6" in (dataset / "manifest.txt").read_text()


def test_render_is_byte_reproducible(dataset, tmp_path):
    again = tmp_path / "again"
    assert main(["render", "--count", "6", "--seed", "7", "--out", str(again)]) == EXIT_OK
    assert _tree(again) == _tree(dataset)


def test_render_usage_errors(tmp_path, capsys):
    assert main(["render", "--count", "0", "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert not (tmp_path / "x").exists()
    assert main(["render", "--count", "2", "--out", str(tmp_path / "y"), "--cap-height", "5,2"]) == EXIT_USAGE
    assert main(["render", "--out", str(tmp_path / "z")]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_render_preset_with_override(tmp_path):
    from bcednet.textgen import HIGH_CONTRAST, render_arrays

    out = tmp_path / "hc"
    assert main(["render", "--count", "3", "--seed", "2", "--preset", "high-contrast", "--length", "3,3", "--out", str(out)]) == EXIT_OK
    _, labels = load_dataset(out)
    from dataclasses import replace

    assert np.array_equal(labels, render_arrays(3, 2, replace(HIGH_CONTRAST, length=(3, 3)))[1])
    assert main(["render", "--count", "1", "--preset", "nope", "--out", str(tmp_path / "n")]) == EXIT_USAGE


def test_resolve_config():
    assert resolve_config("default") == default_config()
    assert resolve_config("small:8:2") == small_config(8, 2)
    from bcednet.cli import DataError, UsageError

    with pytest.raises(UsageError):
        resolve_config("small:x")
    with pytest.raises(DataError):
        resolve_config("/nonexistent/config.txt")


def test_inspect_default(capsys):
    assert main(["inspect"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "2,135,744" in out
    assert "input 32 128" in out
    assert "96.6" in out


def test_inspect_model_file(model_file, capsys):
    assert main(["inspect", "--model", str(model_file)]) == EXIT_OK
    assert "adapter 3x3 16" in capsys.readouterr().out


def test_infer_outputs_and_mode_equivalence(model_file, dataset, tmp_path):
    image = dataset / "000002.pgm"
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["infer", "--model", str(model_file), "--image", str(image), "--out-dir", str(a)]) == EXIT_OK
    assert main(["infer", "--model", str(model_file), "--image", str(image), "--out-dir", str(b), "--mode", "real"]) == EXIT_OK
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted([f"class_{c:02d}.pgm" for c in range(27)] + ["labels.pgm"])
    assert (a / "labels.pgm").read_bytes() == (b / "labels.pgm").read_bytes()
    net = modelio.load(model_file)
    probs, _ = forward(net, read_pgm(image) / 255.0)
    assert np.array_equal(read_pgm(a / "labels.pgm"), predict_labels(probs).astype(np.uint8) * 9)
    # probability x 255 rounded half-up
    assert np.array_equal(read_pgm(a / "class_00.pgm"), np.floor(probs[..., 0] * 255 + 0.5).astype(np.uint8))
    total = sum(read_pgm(a / f"class_{c:02d}.pgm").astype(int) for c in range(27))
    assert np.all(np.abs(total - 255) <= 27)


def test_infer_failures_leave_nothing(model_file, dataset, tmp_path):
    out = tmp_path / "o"
    bad = tmp_path / "bad.bced"
    bad.write_bytes(b"BCED" + b"\0" * 10)
    assert main(["infer", "--model", str(bad), "--image", str(dataset / "000000.pgm"), "--out-dir", str(out)]) == EXIT_DATA
    assert main(["infer", "--model", str(tmp_path / "none"), "--image", str(dataset / "000000.pgm"), "--out-dir", str(out)]) == EXIT_DATA
    small = tmp_path / "small.pgm"
    write_pgm(small, np.zeros((8, 8), np.uint8))
    assert main(["infer", "--model", str(model_file), "--image", str(small), "--out-dir", str(out)]) == EXIT_DATA
    assert not out.exists()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["bad.bced", "small.pgm"]


def test_eval_perfect_fixture(model_file, dataset, tmp_path, capsys):
    # relabel the dataset with the model's own predictions: accuracy must be exactly 1
    fixture = tmp_path / "fixture"
    fixture.mkdir()
    net = modelio.load(model_file)
    images, _ = load_dataset(dataset)
    for i, img in enumerate(images):
        (fixture / f"{i:06d}.pgm").write_bytes((dataset / f"{i:06d}.pgm").read_bytes())
        pred = predict_labels(forward(net, img)[0]).astype(np.uint8)
        (fixture / f"{i:06d}.lbl").write_bytes(pred.tobytes())
    assert main(["eval", "--model", str(model_file), "--data", str(fixture)]) == EXIT_OK
    assert "pixel accuracy  1.0000" in capsys.readouterr().out
    assert main(["eval", "--model", str(model_file), "--data", str(fixture), "--csv"]) == EXIT_OK
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "class,pixels,accuracy" and len(rows) == 1 + 27 + 2
    assert rows[-2].startswith("all,") and rows[-2].endswith("1.000000")


def test_eval_missing_dataset(model_file, tmp_path):
    assert main(["eval", "--model", str(model_file), "--data", str(tmp_path / "nope")]) == EXIT_DATA


def test_bench_rows_match_blocks(model_file, tmp_path, capsys):
    csv_path = tmp_path / "b.csv"
    args = ["bench", "--model", str(model_file), "--batch", "2", "--reps", "3", "--csv", str(csv_path)]
    assert main(args) == EXIT_OK
    out = capsys.readouterr().out
    n_blocks = len(modelio.load(model_file).config.blocks)
    table_rows = [l for l in out.splitlines() if l.split() and l.split()[0].isdigit()]
    assert len(table_rows) == n_blocks
    rows = csv_path.read_text().splitlines()
    assert len(rows) == 1 + 2 * n_blocks + 2
    assert main(["bench", "--model", str(model_file), "--reps", "2"]) == EXIT_USAGE


def test_train_deterministic_and_resumable(dataset, tmp_path, capsys):
    base = ["train", "--data", str(dataset), "--config", "small:8:2", "--batch-size", "3", "--lr", "0.01"]
    assert main(base + ["--epochs", "2", "--out-model", str(tmp_path / "a"), "--val", str(dataset)]) == EXIT_OK
    assert main(base + ["--epochs", "2", "--out-model", str(tmp_path / "b"), "--val", str(dataset)]) == EXIT_OK
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    out = capsys.readouterr().out
    assert out.count("epoch ") == 4 and "val_acc" in out

    assert main(base + ["--epochs", "1", "--out-model", str(tmp_path / "c"), "--checkpoint", str(tmp_path / "ck")]) == EXIT_OK
    capsys.readouterr()
    assert main(base + ["--epochs", "1", "--out-model", str(tmp_path / "d"), "--resume", str(tmp_path / "ck")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "epoch   2" in out
    # one epoch + one resumed epoch equals two uninterrupted epochs
    assert (tmp_path / "d").read_bytes() == (tmp_path / "a").read_bytes()


def test_train_errors(dataset, tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out-model", str(tmp_path / "m")]) == EXIT_DATA
    assert main(["train", "--data", str(dataset), "--config", "small:8:2:7", "--out-model", str(tmp_path / "m")]) != EXIT_OK
    assert not (tmp_path / "m").exists()


def test_console_script_entry_point(tmp_path):
    env = dict(os.environ, BCED_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "bcednet.cli", "inspect", "--config", "small:8:1"], capture_output=True, text=True, env=env)
    assert proc.returncode == 0 and "classifier_softmax 1x1 27" in proc.stdout
