import csv
import json
import os
import subprocess
import sys

import pytest

from mvt import cli
from mvt.model import attention_flops, preset


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def kv(line):
    return dict(item.split("=", 1) for item in line.split())


@pytest.fixture(scope="module")
def d1(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "d1"
    assert cli.main(["gen-data", "--seed", "7", "--out", str(out), "--views", "2", "--size", "4",
                     "--classes", "3", "--train", "30", "--val", "12", "--test", "3"]) == 0
    return out


MICRO = ["--preset", "micro", "--batch-size", "8"]


@pytest.mark.parametrize("command", [[], ["gen-data"], ["train"], ["eval"], ["sweep"], ["bench"]])
def test_help_exits_zero(command, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(command + ["--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    if command in (["train"], ["sweep"]):
        for flag in ("--preset", "--config", "--lr", "--epochs", "--global", "--pooling"):
            assert flag in text


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["gen-data", "--seed", "7"])
    assert e.value.code == 2


def test_gen_data_twice_identical(d1, tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--seed", 7, "--out", tmp_path / "again", "--views", 2,
                       "--size", 4, "--classes", 3, "--train", 30, "--val", 12, "--test", 3)
    assert code == 0
    for name in ("manifest.json", "train.mvtd", "val.mvtd", "test.mvtd"):
        assert (tmp_path / "again" / name).read_bytes() == (d1 / name).read_bytes()
    from mvt.viewgen import dataset_checksum
    assert kv(out)["sha256"] == dataset_checksum(d1)


def test_gen_data_manifest_matches_flags(tmp_path, capsys):
    code, _, _ = run(capsys, "gen-data", "--out", tmp_path / "d", "--views", 12, "--classes", 6,
                     "--train", 500, "--val", 100, "--test", 6, "--size", 4)
    assert code == 0
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert m["counts"] == {"train": 500, "val": 100, "test": 6}
    assert m["geometry"]["views"] == 12 and len(m["classes"]) == 6


def test_train_one_epoch(d1, tmp_path, capsys):
    code, out, err = run(capsys, "train", *MICRO, "--data", d1, "--out", tmp_path / "r",
                         "--epochs", 1)
    assert code == 0
    with open(tmp_path / "r" / "metrics.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1
    assert (tmp_path / "r" / "config.resolved").exists()
    assert (tmp_path / "r" / "history.png").exists()
    assert float(kv(out)["val_acc"]) == float(rows[0]["val_acc"])
    assert "level=INFO logger=mvt" in err


def test_eval_on_checkpoint_equals_last_val_acc(d1, tmp_path, capsys):
    assert run(capsys, "train", *MICRO, "--data", d1, "--out", tmp_path / "r", "--epochs", 3)[0] == 0
    with open(tmp_path / "r" / "metrics.csv", newline="") as f:
        last = list(csv.DictReader(f))[-1]["val_acc"]
    code, out, _ = run(capsys, "eval", "--ckpt", tmp_path / "r" / "last.ckpt", "--data", d1,
                       "--out", tmp_path / "e")
    assert code == 0
    assert float(kv(out)["accuracy"]) == float(last)
    conf = (tmp_path / "e" / "confusion.csv").read_text().split()
    assert sum(int(v) for row in conf for v in row.split(",")) == 12


def test_zero_lr_equals_untrained(d1, tmp_path, capsys):
    code, trained, _ = run(capsys, "train", *MICRO, "--data", d1, "--out", tmp_path / "a",
                           "--epochs", 2, "--lr", 0, "--seed", 3)
    assert code == 0
    run(capsys, "train", *MICRO, "--data", d1, "--out", tmp_path / "b", "--epochs", 0, "--seed", 3)
    code, untrained, _ = run(capsys, "eval", "--ckpt", tmp_path / "b" / "last.ckpt", "--data", d1)
    assert float(kv(trained)["val_acc"]) == float(kv(untrained)["accuracy"])


def test_fp64_rerun_identical_csv(d1, tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "train", *MICRO, "--data", d1, "--out", tmp_path / name, "--epochs", 2,
                   "--dtype", "float64")[0] == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
        (tmp_path / "b" / "metrics.csv").read_bytes()


def test_geometry_mismatch_exit_2(d1, tmp_path, capsys):
    code, _, err = run(capsys, "train", *MICRO, "--data", d1, "--out", tmp_path / "r",
                       "--views", 3, "--epochs", 1)
    assert code == 2
    assert "'views': 2" in err and "'views': 3" in err


def test_missing_dataset_exit_3(tmp_path, capsys):
    code, _, err = run(capsys, "train", *MICRO, "--data", tmp_path / "none", "--out", tmp_path / "r")
    assert code == 3 and "io_error" in err


def test_corrupt_checkpoint_exit_3(d1, tmp_path, capsys):
    (tmp_path / "bad.ckpt").write_bytes(b"MVTC" + b"\0" * 20)
    assert run(capsys, "eval", "--ckpt", tmp_path / "bad.ckpt", "--data", d1)[0] == 3


def test_config_files(d1, tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\npreset = micro\n\n[model]\ndim = 12\nheads = 3\n\n"
                   "[train]\nepochs = 1\nlr = 0.002\nbatch_size = 8\n")
    assert run(capsys, "train", "--config", ini, "--data", d1, "--out", tmp_path / "i",
               "--lr", 0.005)[0] == 0
    resolved = (tmp_path / "i" / "config.resolved").read_text()
    assert "dim = 12" in resolved and "lr = 0.005" in resolved and "epochs = 1" in resolved
    js = tmp_path / "run.json"
    js.write_text(json.dumps({"run": {"preset": "micro"}, "model": {"dim": 12, "heads": 3},
                              "train": {"epochs": 1, "batch_size": 8}}))
    assert run(capsys, "train", "--config", js, "--data", d1, "--out", tmp_path / "j")[0] == 0
    assert "dim = 12" in (tmp_path / "j" / "config.resolved").read_text()


@pytest.mark.parametrize("body", ["[model]\ndepth = 3\n", "[extra]\na = 1\n", "{not json",
                                  "[train]\nepochs = many\n"])
def test_bad_config_exit_2(body, d1, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(body)
    assert run(capsys, "train", "--config", cfg, "--data", d1, "--out", tmp_path / "r")[0] == 2


def test_sweep_block_split_six_rows(d1, tmp_path, capsys):
    code, out, _ = run(capsys, "sweep", "--axis", "block-split", "--total", 6, *MICRO,
                       "--data", d1, "--out", tmp_path / "s", "--seeds", 0, "--epochs", 1)
    assert code == 0
    with open(tmp_path / "s" / "block-split.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["T"]) for r in rows] == [0, 1, 2, 3, 4, 6]
    assert sum(int(kv(line)["best"]) for line in out.splitlines()) == 1
    assert (tmp_path / "s" / "block-split.png").exists()
    code, _, err = run(capsys, "sweep", "--axis", "block-split", "--total", 6, *MICRO,
                       "--data", d1, "--out", tmp_path / "s", "--seeds", 0, "--epochs", 1,
                       "--resume")
    assert code == 0 and err.count("status=reused") == 6


def test_sweep_views_too_many(d1, tmp_path, capsys):
    code, _, _ = run(capsys, "sweep", "--axis", "view-count", "--views-grid", "1,3", *MICRO,
                     "--data", d1, "--out", tmp_path / "v", "--seeds", 0, "--epochs", 1)
    assert code == 2


def test_bench_tiny_flops(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--preset", "tiny", "--objects", 2, "--batch-size", 2,
                       "--out", tmp_path / "b")
    assert code == 0
    assert int(kv(out)["flops_fwd"]) == attention_flops(preset("tiny"))["total"]
    assert (tmp_path / "b" / "bench.png").exists()
    lines = (tmp_path / "b" / "bench.csv").read_text().splitlines()
    assert len(lines) == 1 + 6


def test_no_writes_outside_out(d1, tmp_path, capsys, monkeypatch):
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    run(capsys, "train", *MICRO, "--data", d1, "--out", "r", "--epochs", 1)
    run(capsys, "eval", "--ckpt", "r/last.ckpt", "--data", d1, "--out", "e")
    run(capsys, "bench", "--preset", "micro", "--objects", 2, "--out", "b")
    assert sorted(os.listdir(work)) == ["b", "e", "r"]
    before = sorted(p.name for p in d1.iterdir())
    assert before == ["manifest.json", "test.mvtd", "train.mvtd", "val.mvtd"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mvt", "bench", "--preset", "micro",
                           "--objects", "2", "--local", "-1"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 2
    assert "level=ERROR" in proc.stderr and proc.stdout == ""
