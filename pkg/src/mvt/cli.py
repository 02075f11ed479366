"""Command-line entry point: ``mvt {gen-data,train,eval,sweep,bench}``.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O or file-format
error, 4 numeric failure. Logs go to stderr as ``key=value`` pairs; results go
to stdout and to files under ``--out``.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError
from .model import MVTConfig, MVTModel, attention_flops, load_checkpoint, preset, PRESETS
from .training import TrainConfig, evaluate, read_metrics, train, verify_checkpoint

log = logging.getLogger("mvt")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

GEOMETRY_KEYS = ("views", "width", "height", "channels")
MODEL_FLAGS = {
    "views": int, "width": int, "height": int, "patch": int, "dim": int, "heads": int,
    "local_blocks": int, "global_blocks": int, "classes": int, "dtype": str, "pooling": str,
    "attn_scale": str, "head_hidden": int,
}
TRAIN_FLAGS = {"lr": float, "beta1": float, "beta2": float, "weight_decay": float,
               "epochs": int, "batch_size": int, "seed": int}


# --- config resolution -----------------------------------------------------

def _coerce(cls, key: str, value):
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise ConfigError(f"unknown {cls.__name__} key {key!r}")
    if not isinstance(value, str):
        return value
    t = str(types[key])
    if "bool" in t:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if t.startswith("int"):
            return int(value)
        if t.startswith("float"):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


def read_config_file(path) -> dict[str, dict]:
    """Sections ``model``, ``train`` and ``run`` from a key=value or JSON file."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    else:
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        data = {s: dict(cp[s]) for s in cp.sections()}
    unknown = set(data) - {"model", "train", "run"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return {k: dict(data.get(k, {})) for k in ("model", "train", "run")}


def resolve(args, geometry: dict | None = None) -> tuple[MVTConfig, TrainConfig, dict]:
    """Preset, then config file, then flags. Unset geometry is taken from the dataset."""
    file_cfg = read_config_file(args.config) if getattr(args, "config", None) else \
        {"model": {}, "train": {}, "run": {}}
    run = dict(file_cfg["run"])
    name = args.preset or run.get("preset") or "toy"
    model_kw = {k: _coerce(MVTConfig, k, v) for k, v in file_cfg["model"].items()}
    explicit = set(model_kw)
    for key in MODEL_FLAGS:
        val = getattr(args, key, None)
        if val is not None:
            model_kw[key] = val
            explicit.add(key)
    if geometry is not None:
        for key in GEOMETRY_KEYS:
            if key in explicit and model_kw[key] != geometry[key]:
                want = {k: model_kw.get(k, geometry[k]) for k in GEOMETRY_KEYS}
                raise ConfigError(f"dataset geometry {geometry} does not match model geometry {want}")
            model_kw.setdefault(key, geometry[key])
    try:
        mcfg = preset(name, **model_kw)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    train_kw = {k: _coerce(TrainConfig, k, v) for k, v in file_cfg["train"].items()}
    for key in TRAIN_FLAGS:
        val = getattr(args, key, None)
        if val is not None:
            train_kw[key] = val
    tcfg = TrainConfig.from_dict(train_kw)
    run["preset"] = name
    return mcfg, tcfg, run


def write_resolved(out: Path, mcfg: MVTConfig, tcfg: TrainConfig, run: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = ["[run]"] + [f"{k} = {v}" for k, v in sorted(run.items())]
    lines += ["", "[model]"] + [f"{k} = {v}" for k, v in mcfg.to_dict().items() if v is not None]
    lines += ["", "[train]"] + [f"{k} = {v}" for k, v in tcfg.to_dict().items() if v is not None]
    (out / "config.resolved").write_text("\n".join(lines) + "\n")


def _kv(**kw) -> str:
    return " ".join(f"{k}={v}" for k, v in kw.items())


def _load_data(path):
    from .viewgen import load_dataset
    if path is None:
        raise ConfigError("--data is required")
    return load_dataset(path)


def _geometry(data) -> dict:
    g = dict(data.geometry)
    g["classes"] = len(data.manifest["classes"])
    return g


# --- commands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .viewgen import dataset_checksum, make_dataset
    counts = {"train": args.train, "val": args.val, "test": args.test}
    manifest = make_dataset(args.out, args.seed, counts, views=args.views, width=args.size,
                            height=args.size, classes=args.classes)
    print(_kv(path=args.out, seed=manifest["seed"], classes=len(manifest["classes"]),
              views=args.views, size=args.size, train=args.train, val=args.val, test=args.test,
              sha256=dataset_checksum(args.out)))
    return EXIT_OK


def cmd_train(args) -> int:
    data = _load_data(args.data)
    geo = _geometry(data)
    classes = geo.pop("classes")
    mcfg, tcfg, run = resolve(args, geo)
    if getattr(args, "classes", None) is None and mcfg.classes != classes:
        mcfg = mcfg.replace(classes=classes)
    out = Path(args.out)
    run.update(data=str(args.data), out=str(out))
    write_resolved(out, mcfg, tcfg, run)
    model = MVTModel.create(mcfg, tcfg.seed)
    history = train(model, data["train"], data["val"], tcfg, out)
    last_acc = history[-1].val_acc if history else evaluate(model, data["val"])[0]
    if not verify_checkpoint(out / "last.ckpt", data["val"], last_acc):
        log.error("event=verify_failed ckpt=%s", out / "last.ckpt")
        return EXIT_NUMERIC
    if history and args.plot:
        from .plotting import plot_history
        plot_history(history, out / "history.png")
    print(_kv(epochs=len(history), val_acc=last_acc,
              best_val_acc=max((m.val_acc for m in history), default=last_acc),
              metrics=out / "metrics.csv", ckpt=out / "last.ckpt"))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.ckpt)
    data = _load_data(args.data)
    from .training import check_geometry
    check_geometry(model, data.geometry)
    acc, conf = evaluate(model, data[args.split])
    print(_kv(split=args.split, accuracy=acc, n=int(conf.sum())))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = [",".join(map(str, r)) for r in conf.tolist()]
        (out / "confusion.csv").write_text("\n".join(rows) + "\n")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def cmd_sweep(args) -> int:
    from .harness import SweepSpec, block_split_grid, fixed_local_grid, run_sweep
    data = _load_data(args.data)
    geo = _geometry(data)
    classes = geo.pop("classes")
    if args.axis == "view-count":
        geo["views"] = args.views if args.views is not None else geo["views"]
        mcfg, tcfg, run = resolve(args, None)
        mcfg = mcfg.replace(**{k: geo[k] for k in ("width", "height", "channels")})
    else:
        base_views = args.views if args.views is not None else min(geo["views"], 6)
        args.views = None
        mcfg, tcfg, run = resolve(args, None)
        mcfg = mcfg.replace(views=base_views, **{k: geo[k] for k in ("width", "height", "channels")})
    if getattr(args, "classes", None) is None:
        mcfg = mcfg.replace(classes=classes)
    if args.axis == "block-split":
        if args.fixed_local is not None:
            grid = fixed_local_grid(args.fixed_local, args.max_global)
        else:
            grid = block_split_grid(args.total)
    elif args.axis == "view-count":
        grid = _int_list(args.views_grid)
    else:
        grid = ["cls", "avg"]
    spec = SweepSpec(args.axis, grid, mcfg, tcfg, _int_list(args.seeds))
    out = Path(args.out)
    run.update(axis=args.axis, data=str(args.data), seeds=args.seeds)
    write_resolved(out, mcfg, tcfg, run)
    results = run_sweep(spec, data, out, resume=args.resume)
    best = max(results, key=lambda r: r.mean_acc)
    for r in results:
        print(_kv(cell=r.cell_id, mean_acc=f"{r.mean_acc:.4f}", flops_fwd=r.flops_fwd,
                  params=r.params, best=int(r is best)))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .harness import bench, block_split_grid
    mcfg, _, _ = resolve(args, None)
    res = bench(mcfg, objects=args.objects, batch_size=args.batch_size)
    fl = attention_flops(mcfg)
    print(_kv(preset=args.preset or "toy", S=mcfg.local_blocks, T=mcfg.global_blocks,
              L=mcfg.views, flops_fwd=fl["total"], flops_local=fl["local_total"],
              flops_global=fl["global_total"], params=res["params"],
              seconds_per_epoch=f"{res['seconds_per_epoch']:.4f}", objects=res["objects"],
              peak_bytes=res["peak_bytes"]))
    if args.out:
        from .plotting import plot_bench
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        total = mcfg.local_blocks + mcfg.global_blocks
        rows = []
        lines = ["S,T,L,flops_fwd,flops_local,flops_global,params"]
        for s, t in block_split_grid(total):
            c = mcfg.replace(local_blocks=s, global_blocks=t)
            f = attention_flops(c)
            rows.append({"S": s, "T": t, "flops": f})
            lines.append(f"{s},{t},{c.views},{f['total']},{f['local_total']},"
                         f"{f['global_total']},{MVTModel.create(c).num_params()}")
        (out / "bench.csv").write_text("\n".join(lines) + "\n")
        (out / "bench.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
        plot_bench(rows, out / "bench.png")
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def _model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--preset", choices=sorted(PRESETS), help="base architecture (default: toy)")
    g.add_argument("--config", help="key=value (INI sections model/train/run) or JSON config file")
    g.add_argument("--views", type=int, help="views per object L")
    g.add_argument("--width", type=int, help="view width W")
    g.add_argument("--height", type=int, help="view height H")
    g.add_argument("--patch", type=int, help="patch size p")
    g.add_argument("--dim", type=int, help="hidden width D")
    g.add_argument("--heads", type=int, help="attention heads M")
    g.add_argument("--local", dest="local_blocks", type=int, help="local blocks S")
    g.add_argument("--global", dest="global_blocks", type=int, help="global blocks T")
    g.add_argument("--classes", type=int, help="number of classes K")
    g.add_argument("--dtype", choices=["float32", "float64"], help="element type")
    g.add_argument("--pooling", choices=["cls", "avg"], help="class-token mean or patch average")
    g.add_argument("--attn-scale", dest="attn_scale", choices=["head", "full"],
                   help="score scale: sqrt(per-head width) or sqrt(D)")
    g.add_argument("--head-hidden", dest="head_hidden", type=int,
                   help="hidden width of a two-layer classifier head (0 = single affine)")


def _train_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, help="learning rate (default 1e-3)")
    g.add_argument("--beta1", type=float, help="AdamW beta1 (default 0.9)")
    g.add_argument("--beta2", type=float, help="AdamW beta2 (default 0.98)")
    g.add_argument("--weight-decay", dest="weight_decay", type=float, help="decoupled decay (default 0.05)")
    g.add_argument("--epochs", type=int, help="epochs (default 60)")
    g.add_argument("--batch-size", dest="batch_size", type=int, help="objects per batch (default 16)")
    g.add_argument("--seed", type=int, help="init and shuffle seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a procedural multi-view dataset")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--seed", type=int, default=7, help="dataset seed (default 7)")
    p.add_argument("--views", type=int, default=6, help="views per object (default 6)")
    p.add_argument("--size", type=int, default=32, help="view width and height in pixels (default 32)")
    p.add_argument("--classes", type=int, default=6, help="number of solid categories (default 6)")
    p.add_argument("--train", type=int, default=500, help="training objects (default 500)")
    p.add_argument("--val", type=int, default=100, help="validation objects (default 100)")
    p.add_argument("--test", type=int, default=100, help="test objects (default 100)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and save checkpoints and metrics")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--no-plot", dest="plot", action="store_false", help="skip history.png")
    _model_args(p)
    _train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="val", choices=["train", "val", "test"], help="split (default val)")
    p.add_argument("--out", help="directory for confusion.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run an ablation sweep")
    p.add_argument("--axis", required=True, choices=["block-split", "view-count", "pooling-mode"])
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="sweep directory")
    p.add_argument("--total", type=int, default=6, help="S+T for block-split (default 6)")
    p.add_argument("--fixed-local", dest="fixed_local", type=int,
                   help="hold S fixed and vary T from 0 to --max-global instead")
    p.add_argument("--max-global", dest="max_global", type=int, default=6, help="largest T with --fixed-local")
    p.add_argument("--views-grid", dest="views_grid", default="1,3,6", help="view counts for view-count")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--resume", action="store_true", help="reuse finished cells under --out")
    _model_args(p)
    _train_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="FLOPs, parameters and timed training steps")
    p.add_argument("--objects", type=int, default=16, help="objects in the timed epoch (default 16)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=8, help="batch size (default 8)")
    p.add_argument("--out", help="directory for bench.csv, bench.json and bench.png")
    _model_args(p)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="level=%(levelname)s logger=%(name)s %(message)s", force=True)
    try:
        return args.func(args)
    except (ConfigError, ContractError, DimensionError) as e:
        log.error("event=config_error message=%r", str(e))
        return EXIT_CONFIG
    except (OSError, FormatError) as e:
        log.error("event=io_error message=%r", str(e))
        return EXIT_IO
    except (NumericError, FloatingPointError) as e:
        log.error("event=numeric_error message=%r", str(e))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
