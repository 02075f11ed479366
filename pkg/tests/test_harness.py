import csv
import json

import numpy as np
import pytest

from mvt import harness as H
from mvt import viewgen as V
from mvt.errors import ConfigError
from mvt.model import MVTModel, attention_flops, param_count, preset
from mvt.training import TrainConfig, evaluate, train

QUICK = TrainConfig(epochs=2, batch_size=8, lr=3e-3)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("hdata")
    V.make_dataset(out, 3, {"train": 24, "val": 12, "test": 3}, views=4, width=4, height=4,
                   classes=3)
    return V.load_dataset(out)


def base(**kw):
    return preset("micro", **{"views": 4, **kw})


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_block_split_grids():
    assert H.block_split_grid(6) == [(6, 0), (5, 1), (4, 2), (3, 3), (2, 4), (0, 6)]
    assert [t for _, t in H.block_split_grid(12)] == [0, 1, 2, 4, 8, 12]
    assert H.fixed_local_grid(2, 3) == [(2, 0), (2, 1), (2, 2), (2, 3)]


@pytest.mark.parametrize("grid", [[(1, 1), (2, 1)], [(1, -1)], [(1, 2, 3)]])
def test_invalid_block_grid(grid, data, tmp_path):
    spec = H.SweepSpec("block-split", grid, base(), QUICK, seeds=[0])
    with pytest.raises(ConfigError):
        H.sweep_block_split(spec, data, tmp_path)


def test_unknown_axis():
    with pytest.raises(ConfigError):
        H.SweepSpec("depth", [1], base(), QUICK)


def test_one_cell_equals_direct_train(data, tmp_path):
    cfg = base(dtype="float64")
    spec = H.SweepSpec("block-split", [(1, 1)], cfg, QUICK, seeds=[5])
    (res,) = H.sweep_block_split(spec, data, tmp_path / "sweep")
    model = MVTModel.create(cfg, 5)
    hist = train(model, data["train"], data["val"],
                 TrainConfig(**{**QUICK.to_dict(), "seed": 5}), tmp_path / "direct")
    assert res.accs == [max(h.val_acc for h in hist)]
    cell = tmp_path / "sweep" / "cells" / "S1_T1" / "seed5"
    assert (cell / "metrics.csv").read_bytes() == (tmp_path / "direct" / "metrics.csv").read_bytes()
    assert (cell / "last.ckpt").read_bytes() == (tmp_path / "direct" / "last.ckpt").read_bytes()
    rows = read_csv(tmp_path / "sweep" / "block-split.csv")
    assert len(rows) == 1 and float(rows[0]["val_acc"]) == res.mean_acc


def test_block_split_table(data, tmp_path):
    spec = H.SweepSpec("block-split", H.block_split_grid(3)[::-1], base(), QUICK, seeds=[0, 1])
    results = H.sweep_block_split(spec, data, tmp_path)
    rows = read_csv(tmp_path / "block-split.csv")
    assert list(rows[0]) == H.SWEEP_HEADER
    assert [int(r["T"]) for r in rows] == [0, 1, 2, 3]
    flops = [int(r["flops_fwd"]) for r in rows]
    assert all(a < b for a, b in zip(flops, flops[1:]))
    assert len({int(r["params"]) for r in rows}) == 1
    assert int(rows[0]["params"]) == param_count(base(local_blocks=3, global_blocks=0))
    assert all(r["seed"] == "0;1" for r in rows)
    for r, res in zip(rows, results):
        assert float(r["val_acc"]) == pytest.approx(np.mean(res.accs))
        assert 0.0 <= res.min_acc <= res.mean_acc <= res.max_acc <= 1.0
        assert int(r["flops_fwd"]) == attention_flops(base(local_blocks=res.S,
                                                           global_blocks=res.T))["total"]
    summary = json.loads((tmp_path / "block-split_summary.json").read_text())
    assert summary["best_mean_acc"] == max(r.mean_acc for r in results)
    assert (tmp_path / "block-split.png").stat().st_size > 0


def test_resume_reuses_finished_cells(data, tmp_path, monkeypatch):
    spec = H.SweepSpec("block-split", [(2, 0), (1, 1), (0, 2)], base(), QUICK, seeds=[0])
    H.run_sweep(spec, data, tmp_path, plot=False)
    first = (tmp_path / "block-split.csv").read_bytes()
    (tmp_path / "cells" / "S1_T1" / "seed0" / "result.json").unlink()
    calls = []
    real = H.run_cell

    def counting(cfg, *a, **kw):
        calls.append((cfg.local_blocks, cfg.global_blocks))
        return real(cfg, *a, **kw)

    monkeypatch.setattr(H, "run_cell", counting)
    H.run_sweep(spec, data, tmp_path, resume=True, plot=False)
    assert calls == [(1, 1)]
    again = read_csv(tmp_path / "block-split.csv")
    old = list(csv.DictReader(first.decode().splitlines()))
    for a, b in zip(old, again):
        if a["cell_id"] != "S1_T1":
            assert a == b
        assert a["val_acc"] == b["val_acc"]
    calls.clear()
    before = (tmp_path / "block-split.csv").read_bytes()
    H.run_sweep(spec, data, tmp_path, resume=True, plot=False)
    assert calls == []
    assert (tmp_path / "block-split.csv").read_bytes() == before


def test_resume_ignores_results_for_other_config(data, tmp_path):
    spec = H.SweepSpec("block-split", [(1, 1)], base(), QUICK, seeds=[0])
    H.run_sweep(spec, data, tmp_path, plot=False)
    wider = H.SweepSpec("block-split", [(1, 1)], base(dim=12, heads=3), QUICK, seeds=[0])
    (res,) = H.run_sweep(wider, data, tmp_path, resume=True, plot=False)
    assert res.params == param_count(base(dim=12, heads=3))
    rec = json.loads((tmp_path / "cells" / "S1_T1" / "seed0" / "result.json").read_text())
    assert rec["config"]["dim"] == 12


def test_reevaluation_reproduces_accuracies(data, tmp_path):
    spec = H.SweepSpec("block-split", [(2, 0), (1, 1)], base(), QUICK, seeds=[0, 1])
    H.run_sweep(spec, data, tmp_path, plot=False)
    pairs = H.reevaluate(tmp_path, "block-split", data)
    assert len(pairs) == 4
    for stored, recomputed in pairs.values():
        assert stored == recomputed


def test_pooling_two_rows_same_seeds(data, tmp_path):
    spec = H.SweepSpec("pooling-mode", ["cls", "avg"], base(), QUICK, seeds=[0, 2])
    results = H.ablate_pooling(spec, data, tmp_path)
    rows = read_csv(tmp_path / "pooling-mode.csv")
    assert [r["pooling"] for r in rows] == ["cls", "avg"]
    assert rows[0]["seed"] == rows[1]["seed"] == "0;2"
    assert {r.params for r in results} == {param_count(base())}


def test_pooling_grid_must_be_both_modes(data, tmp_path):
    spec = H.SweepSpec("pooling-mode", ["cls"], base(), QUICK, seeds=[0])
    with pytest.raises(ConfigError):
        H.ablate_pooling(spec, data, tmp_path)


def test_zero_model_same_accuracy_in_both_pooling_modes(data):
    accs = []
    for mode in ("cls", "avg"):
        model = MVTModel.create(base(pooling=mode), 0)
        for _, t in model.params.items():
            t.data[...] = 0
        model.params["head.b"].data[:] = [0.1, 0.3, 0.2]
        accs.append(evaluate(model, data["val"])[0])
    assert accs[0] == accs[1] == pytest.approx(1 / 3)


def test_views_full_subset_equals_base(data, tmp_path):
    cfg = base(dtype="float64")
    spec = H.SweepSpec("view-count", [4], cfg, QUICK, seeds=[1])
    (res,) = H.sweep_views(spec, data, tmp_path / "sweep")
    model = MVTModel.create(cfg, 1)
    hist = train(model, data["train"], data["val"], TrainConfig(**{**QUICK.to_dict(), "seed": 1}))
    assert res.accs == [max(h.val_acc for h in hist)]


def test_views_subset_table(data, tmp_path):
    spec = H.SweepSpec("view-count", [4, 1, 2], base(), QUICK, seeds=[0])
    results = H.sweep_views(spec, data, tmp_path)
    assert [r.L for r in results] == [1, 2, 4]
    assert len({r.params for r in results}) == 1
    rows = read_csv(tmp_path / "view-count.csv")
    assert [r["cell_id"] for r in rows] == ["L1", "L2", "L4"]


def test_views_beyond_rendered(data, tmp_path):
    spec = H.SweepSpec("view-count", [2, 5], base(), QUICK, seeds=[0])
    with pytest.raises(ConfigError):
        H.sweep_views(spec, data, tmp_path)
    assert not (tmp_path / "cells").exists()


def test_parallel_workers_match_serial(data, tmp_path):
    spec = H.SweepSpec("block-split", [(2, 0), (1, 1)], base(), QUICK, seeds=[0, 1])
    serial = H.run_sweep(spec, data, tmp_path / "a", workers=1, plot=False)
    parallel = H.run_sweep(spec, data, tmp_path / "b", workers=2, plot=False)
    assert [r.accs for r in serial] == [r.accs for r in parallel]


def test_bad_thread_setting(monkeypatch):
    monkeypatch.setenv("MVT_THREADS", "many")
    with pytest.raises(ConfigError):
        H.max_workers()
    monkeypatch.setenv("MVT_THREADS", "3")
    assert H.max_workers() == 3


def test_bench_reports():
    cfg = base()
    b = H.bench(cfg, objects=4, batch_size=2)
    assert b["flops_fwd"] == attention_flops(cfg)["total"]
    assert b["params"] == b["params_closed_form"] == param_count(cfg)
    assert b["seconds_per_epoch"] > 0 and b["peak_bytes"] > 4 * b["params"] * 4
    assert H.bench(base(views=2), objects=2)["params"] == b["params"]


def test_bench_flops_grow_with_global_depth():
    f = [H.bench(base(local_blocks=4 - t, global_blocks=t), objects=2)["flops_fwd"]
         for t in (0, 2, 4)]
    assert f[0] < f[1] < f[2]


@pytest.mark.slow
def test_three_views_not_worse_than_one(toy_data, tmp_path):
    from pathlib import Path

    from conftest import first_train

    base_run = json.loads((Path(__file__).resolve().parents[1] / "baselines" /
                           "view-count.json").read_text())
    s = base_run["settings"]
    spec = H.SweepSpec("view-count", [1, 3], preset("toy"),
                       TrainConfig(epochs=s["epochs"], batch_size=s["batch_size"], lr=s["lr"]),
                       seeds=s["seeds"])
    one, three = H.sweep_views(spec, first_train(toy_data, s["train_subset"]), tmp_path)
    assert (one.L, three.L) == (1, 3)
    assert three.mean_acc >= one.mean_acc - 0.02
    ref = base_run["cells"]
    assert ref["L3"]["mean"] >= ref["L1"]["mean"] - 0.02
