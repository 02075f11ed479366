"""Ablation sweeps and efficiency benchmarks.

Each sweep cell is trained once per seed into ``out/cells/<cell_id>/seed<k>/``.
A finished seed leaves ``result.json`` next to its checkpoints; with
``resume=True`` those seeds are read back instead of retrained, so an
interrupted sweep only runs the missing work.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import MVTConfig, MVTModel, attention_flops, forward, load_checkpoint, param_count
from .tensor import Tape
from .training import TrainConfig, cross_entropy, evaluate, train
from .viewgen import Dataset, Split

log = logging.getLogger(__name__)

AXES = ("block-split", "view-count", "pooling-mode")
SWEEP_HEADER = ["axis", "cell_id", "seed", "S", "T", "L", "pooling", "val_acc",
                "train_seconds", "flops_fwd", "params"]
GLOBAL_COUNTS = {6: (0, 1, 2, 3, 4, 6), 12: (0, 1, 2, 4, 8, 12)}


@dataclass
class SweepSpec:
    axis: str
    grid: list
    base: MVTConfig
    train: TrainConfig
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES}, got {self.axis!r}")
        if not self.grid:
            raise ConfigError("sweep grid is empty")
        if not self.seeds:
            raise ConfigError("need at least one seed")


@dataclass
class SweepResult:
    axis: str
    cell_id: str
    S: int
    T: int
    L: int
    pooling: str
    seeds: list[int]
    accs: list[float]
    train_seconds: float
    seconds_per_epoch: float
    flops_fwd: int
    params: int

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.accs))

    @property
    def min_acc(self) -> float:
        return float(np.min(self.accs))

    @property
    def max_acc(self) -> float:
        return float(np.max(self.accs))

    def csv_row(self) -> list:
        return [self.axis, self.cell_id, ";".join(map(str, self.seeds)), self.S, self.T, self.L,
                self.pooling, repr(self.mean_acc), f"{self.train_seconds:.3f}", self.flops_fwd,
                self.params]


def block_split_grid(total: int) -> list[tuple[int, int]]:
    counts = GLOBAL_COUNTS.get(total, tuple(range(total + 1)))
    return [(total - t, t) for t in counts]


def fixed_local_grid(local: int, max_global: int) -> list[tuple[int, int]]:
    return [(local, t) for t in range(max_global + 1)]


def validate_block_grid(grid) -> None:
    grid = [tuple(g) for g in grid]
    if any(len(g) != 2 or min(g) < 0 for g in grid):
        raise ConfigError(f"block-split cells must be (S, T) pairs of non-negative ints: {grid}")
    if len(grid) == 1:
        return
    same_total = len({s + t for s, t in grid}) == 1
    same_local = len({s for s, _ in grid}) == 1
    if not (same_total or same_local):
        raise ConfigError("block-split grid must keep S+T fixed or keep S fixed")


def _cells(spec: SweepSpec) -> list[tuple[str, MVTConfig]]:
    base = spec.base
    cells = []
    if spec.axis == "block-split":
        validate_block_grid(spec.grid)
        for s, t in sorted((tuple(g) for g in spec.grid), key=lambda g: (g[1], g[0])):
            cells.append((f"S{s}_T{t}", base.replace(local_blocks=s, global_blocks=t)))
    elif spec.axis == "view-count":
        for L in sorted(int(v) for v in spec.grid):
            cells.append((f"L{L}", base.replace(views=L)))
    else:
        for mode in spec.grid:
            cells.append((f"pool_{mode}", base.replace(pooling=mode)))
    return cells


def _split_for(split: Split, views: int) -> Split:
    rendered = split.views.shape[1]
    if views > rendered:
        raise ConfigError(f"cell needs {views} views but the dataset has {rendered}")
    return split if views == rendered else split.with_views(views)


def run_cell(cfg: MVTConfig, tcfg: TrainConfig, seed: int, train_split: Split,
             val_split: Split, out_dir) -> dict:
    """Train one (cell, seed) from scratch; returns the stored result record."""
    out = Path(out_dir)
    model = MVTModel.create(cfg, seed)
    tc = TrainConfig(**{**tcfg.to_dict(), "seed": seed})
    t0 = time.perf_counter()
    history = train(model, _split_for(train_split, cfg.views), _split_for(val_split, cfg.views),
                    tc, out)
    seconds = time.perf_counter() - t0
    best = max(history, key=lambda m: m.val_acc) if history else None
    result = {
        "seed": seed,
        "val_acc": best.val_acc if best else 0.0,
        "best_epoch": best.epoch if best else 0,
        "final_val_acc": history[-1].val_acc if history else 0.0,
        "train_seconds": seconds,
        "seconds_per_epoch": seconds / max(len(history), 1),
        "config": cfg.to_dict(),
    }
    (out / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def _load_result(path: Path, cfg: MVTConfig) -> dict | None:
    rfile = path / "result.json"
    if not (rfile.exists() and (path / "best.ckpt").exists()):
        return None
    try:
        res = json.loads(rfile.read_text())
    except json.JSONDecodeError:
        return None
    return res if res.get("config") == cfg.to_dict() else None


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("MVT_THREADS", "1")))
    except ValueError:
        raise ConfigError("MVT_THREADS must be an integer") from None


def _run_job(args):
    cfg, tcfg, seed, tr, va, path = args
    return run_cell(cfg, tcfg, seed, tr, va, path)


def run_sweep(spec: SweepSpec, data: Dataset, out_dir, resume: bool = False,
              workers: int | None = None, plot: bool = True) -> list[SweepResult]:
    """Train every cell for every seed and write ``<axis>.csv`` (+ figure) to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = _cells(spec)
    tr, va = data["train"], data["val"]
    for _, cfg in cells:
        _split_for(tr, cfg.views)
    workers = workers or max_workers()
    records: dict[tuple[str, int], dict] = {}
    todo = []
    for cell_id, cfg in cells:
        for seed in spec.seeds:
            path = out / "cells" / cell_id / f"seed{seed}"
            done = _load_result(path, cfg) if resume else None
            if done is not None:
                log.info("cell=%s seed=%d status=reused", cell_id, seed)
                records[(cell_id, seed)] = done
            else:
                todo.append((cell_id, seed, (cfg, spec.train, seed, tr, va, path)))
    results: list[SweepResult] = []

    def flush():
        results[:] = _collect(spec, cells, records)
        _write_csv(out / f"{spec.axis}.csv", results)

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (cell_id, seed, _), rec in zip(todo, pool.map(_run_job, [j for *_, j in todo])):
                records[(cell_id, seed)] = rec
                log.info("cell=%s seed=%d val_acc=%.4f", cell_id, seed, rec["val_acc"])
        flush()
    else:
        for cell_id, seed, job in todo:
            rec = _run_job(job)
            records[(cell_id, seed)] = rec
            log.info("cell=%s seed=%d val_acc=%.4f", cell_id, seed, rec["val_acc"])
            flush()
    flush()
    if results:
        best = max(results, key=lambda r: r.mean_acc)
        summary = {"axis": spec.axis, "best_cell": best.cell_id, "best_mean_acc": best.mean_acc,
                   "cells": [asdict(r) | {"mean_acc": r.mean_acc} for r in results]}
        (out / f"{spec.axis}_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        if plot:
            from .plotting import plot_sweep
            plot_sweep(results, out / f"{spec.axis}.png")
    return results


def _collect(spec: SweepSpec, cells, records) -> list[SweepResult]:
    results = []
    for cell_id, cfg in cells:
        recs = [records[(cell_id, s)] for s in spec.seeds if (cell_id, s) in records]
        if len(recs) != len(spec.seeds):
            continue
        results.append(SweepResult(
            axis=spec.axis, cell_id=cell_id, S=cfg.local_blocks, T=cfg.global_blocks,
            L=cfg.views, pooling=cfg.pooling, seeds=list(spec.seeds),
            accs=[r["val_acc"] for r in recs],
            train_seconds=float(np.mean([r["train_seconds"] for r in recs])),
            seconds_per_epoch=float(np.mean([r["seconds_per_epoch"] for r in recs])),
            flops_fwd=attention_flops(cfg)["total"], params=param_count(cfg)))
    return results


def _write_csv(path: Path, results: list[SweepResult]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in results:
        w.writerow(r.csv_row())
    path.write_text(buf.getvalue())


def sweep_block_split(spec: SweepSpec, data: Dataset, out_dir, **kw) -> list[SweepResult]:
    if spec.axis != "block-split":
        raise ConfigError("sweep_block_split needs axis='block-split'")
    return run_sweep(spec, data, out_dir, **kw)


def sweep_views(spec: SweepSpec, data: Dataset, out_dir, **kw) -> list[SweepResult]:
    if spec.axis != "view-count":
        raise ConfigError("sweep_views needs axis='view-count'")
    return run_sweep(spec, data, out_dir, **kw)


def ablate_pooling(spec: SweepSpec, data: Dataset, out_dir, **kw) -> list[SweepResult]:
    if spec.axis != "pooling-mode":
        raise ConfigError("ablate_pooling needs axis='pooling-mode'")
    if sorted(spec.grid) != ["avg", "cls"]:
        raise ConfigError("pooling ablation compares exactly 'cls' and 'avg'")
    return run_sweep(spec, data, out_dir, **kw)


def reevaluate(out_dir, axis: str, data: Dataset) -> dict[tuple[str, int], tuple[float, float]]:
    """(stored, recomputed) accuracy for every finished seed under ``out_dir``."""
    out = {}
    for rfile in sorted(Path(out_dir, "cells").glob("*/seed*/result.json")):
        rec = json.loads(rfile.read_text())
        model, _ = load_checkpoint(rfile.parent / "best.ckpt")
        acc, _ = evaluate(model, _split_for(data["val"], model.config.views))
        out[(rfile.parent.parent.name, rec["seed"])] = (rec["val_acc"], acc)
    return out


def bench(cfg: MVTConfig, objects: int = 16, batch_size: int = 8, seed: int = 0) -> dict:
    """Analytic FLOPs, parameter count, timed train-step epoch and a memory estimate.

    Time per epoch is measured over ``objects`` random objects; the memory
    estimate is live tape bytes at the peak step plus parameters, gradients
    and the two AdamW moments.
    """
    model = MVTModel.create(cfg, seed)
    rng = np.random.default_rng(seed)
    x = rng.random((objects, cfg.views, cfg.width, cfg.height, cfg.channels)).astype(cfg.np_dtype)
    y = rng.integers(0, cfg.classes, objects)
    peak = 0
    t0 = time.perf_counter()
    for i in range(0, objects, batch_size):
        model.params.zero_grad()
        with Tape() as tape:
            loss = cross_entropy(forward(model, x[i:i + batch_size]), y[i:i + batch_size])
        T.backward(tape, loss)
        peak = max(peak, tape.nbytes())
    seconds = time.perf_counter() - t0
    model.params.zero_grad()
    flops = attention_flops(cfg)
    return {
        "S": cfg.local_blocks, "T": cfg.global_blocks, "L": cfg.views,
        "flops": flops, "flops_fwd": flops["total"],
        "params": model.num_params(), "params_closed_form": param_count(cfg),
        "seconds_per_epoch": seconds, "objects": objects,
        "peak_bytes": peak + 4 * model.params.nbytes(),
    }
