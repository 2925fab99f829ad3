import csv
import json

import numpy as np
import pytest

from icogauge import cli
from icogauge.cli import main
from icogauge.data import write_idx
from icogauge.geometry import num_pixels


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("r,n", [(4, 2562), (0, 12)])
def test_grid_prints_pixel_count(tmp_path, capsys, r, n):
    code, out, _ = run(["grid", "--res", str(r), "--out", str(tmp_path / "g.json")], capsys)
    assert code == 0
    assert f"N={n}" in out.splitlines()
    doc = json.loads((tmp_path / "g.json").read_text())
    assert doc["num_pixels"] == n and len(doc["group"]["pixel_perm"]) == 60


def test_grid_bad_path(tmp_path, capsys):
    code, _, err = run(["grid", "--res", "1", "--out", str(tmp_path / "no" / "such" / "g.json")], capsys)
    assert code == 3 and "error" in err


def test_usage_errors(capsys):
    for argv in (["grid", "--res", "1"], ["grid", "--res", "99", "--out", "x"], ["grid", "--bogus"],
                 ["--threads", "0", "grid", "--res", "1", "--out", "x"], ["check", "--suite", "nope"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
    capsys.readouterr()


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv("ICOGAUGE_THREADS", "3")
    assert cli._threads(None) == 3
    assert cli._threads("2") == 2
    monkeypatch.delenv("ICOGAUGE_THREADS")
    assert cli._threads(None) >= 1


def test_check_kernel_suite(capsys):
    code, out, _ = run(["--threads", "1", "check", "--suite", "kernel"], capsys)
    assert code == 0
    assert "suite kernel: PASS" in out
    assert all(line.startswith(("PASS", "suite")) for line in out.splitlines())


def test_check_equivariance_small(capsys):
    code, out, _ = run(["check", "--suite", "equivariance", "--res", "2"], capsys)
    assert code == 0 and "FAIL" not in out


def test_check_reports_failure(monkeypatch, capsys):
    from icogauge import checks

    monkeypatch.setattr(checks, "run_suite", lambda *a, **k: [checks.Result("x", 1.0, 0.0, False)])
    code, out, _ = run(["check", "--suite", "kernel"], capsys)
    assert code == 1 and "FAIL" in out


def test_bench_small(tmp_path, capsys):
    path = tmp_path / "b.csv"
    code, out, _ = run(["bench", "--res-min", "1", "--res-max", "3", "--reps", "1", "--budget-mb", "4",
                        "--out", str(path)], capsys)
    assert code == 0
    rows = list(csv.reader(path.open()))
    assert rows[0] == list(cli.BENCH_HEADER)
    assert [int(r[1]) for r in rows[1:]] == [num_pixels(r) for r in (1, 2, 3)]
    assert "ratio" in out


@pytest.mark.parametrize("bad", [["--reps", "0"], ["--res-min", "5", "--res-max", "4"], ["--res-max", "8"]])
def test_bench_usage_errors(tmp_path, bad, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--out", str(tmp_path / "b.csv")] + bad)
    assert exc.value.code == 2
    capsys.readouterr()


@pytest.fixture
def tiny_mnist(tmp_path):
    rng = np.random.default_rng(0)
    images = (rng.uniform(size=(10, 28, 28)) > 0.7).astype(np.uint8) * 255
    labels = (np.arange(10) % 3).astype(np.uint8)
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lab", labels)
    return tmp_path


def test_mnist_pipeline(tiny_mnist, capsys):
    d = tiny_mnist
    for mode in ("N", "I"):
        code, out, _ = run(["mnist", "prepare", "--images", str(d / "img"), "--labels", str(d / "lab"), "--mode", mode,
                            "--res", "4", "--seed", "1", "--out", str(d / f"ds_{mode}")], capsys)
        assert code == 0 and "wrote 10 items" in out
    code, out, _ = run(["--threads", "1", "mnist", "train", "--train", str(d / "ds_N"), "--test", str(d / "ds_N"),
                        "--epochs", "1", "--batch", "5", "--out", str(d / "ck"), "--log", str(d / "log.csv")], capsys)
    assert code == 0 and "epoch 1 train" in out
    assert (d / "log.csv").read_text().splitlines()[0] == "epoch,split,loss,accuracy"
    code, out, _ = run(["mnist", "eval", "--checkpoint", str(d / "ck"), "--test", str(d / "ds_N"), str(d / "ds_I")],
                       capsys)
    assert code == 0
    assert "N/N" in out and "N/I" in out
    assert "prediction agreement N/N vs N/I: 100.00%" in out


def test_mnist_train_resolution_too_low(tiny_mnist, capsys):
    d = tiny_mnist
    run(["mnist", "prepare", "--images", str(d / "img"), "--labels", str(d / "lab"), "--res", "3",
         "--out", str(d / "ds3")], capsys)
    code, _, err = run(["mnist", "train", "--train", str(d / "ds3"), "--epochs", "1", "--out", str(d / "ck")], capsys)
    assert code == 2 and "resolution" in err


def test_mnist_eval_without_checkpoint(tmp_path, capsys):
    code, _, err = run(["mnist", "eval", "--checkpoint", str(tmp_path / "none"), "--test", str(tmp_path)], capsys)
    assert code != 0 and "checkpoint" in err


def test_mnist_prepare_bad_input(tmp_path, capsys):
    (tmp_path / "img").write_bytes(b"\x00\x00\x08\x03garbage")
    write_idx(tmp_path / "lab", np.zeros(1, dtype=np.uint8))
    code, _, err = run(["mnist", "prepare", "--images", str(tmp_path / "img"), "--labels", str(tmp_path / "lab"),
                        "--out", str(tmp_path / "ds")], capsys)
    assert code == 3 and "byte offset" in err
