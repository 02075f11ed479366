"""Cross-entropy training with AdamW, evaluation and checkpointing."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .model import MVTModel, attention_flops, forward, load_checkpoint, save_checkpoint
from .tensor import ParamStore, Tape, Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "train_acc", "val_acc", "seconds", "flops_fwd"]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.05
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 1
    # None: zero the seconds column when training in float64 so metrics files are byte-stable
    deterministic_log: bool | None = None

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.m.values()) + sum(a.nbytes for a in self.v.values())


@dataclass
class Metrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    seconds: float
    flops_fwd: int
    peak_bytes: int = 0


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax of ``logits``."""
    z = logits.data
    if z.ndim == 1:
        z = z[None]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = z.shape
    if labels.shape[0] != b:
        raise ContractError(f"{labels.shape[0]} labels for {b} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    shape = logits.shape

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((p * (g / b)).reshape(shape),)

    return T.apply_op(np.asarray(loss, dtype=z.dtype), (logits,), back)


def decays(name: str, t: Tensor) -> bool:
    """Weight decay applies to weight matrices only, never to embeddings, LN or biases."""
    return t.ndim == 2 and name not in ("embed.pos", "embed.cls")


def adamw_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamWState,
               cfg: TrainConfig) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = grads[name]
        if g.shape != t.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, expected {t.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay and decays(name, t):
            t.data *= t.dtype.type(1.0 - cfg.lr * cfg.weight_decay)
        upd = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        t.data -= (cfg.lr * upd).astype(t.dtype, copy=False)


def predict(model: MVTModel, views: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Logits for a stack of objects, evaluated without recording a tape."""
    out = []
    for i in range(0, len(views), batch_size):
        out.append(forward(model, views[i:i + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.classes))


def evaluate(model: MVTModel, split, batch_size: int = 64) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix (rows true class, columns prediction).

    Ties in the logits go to the lowest class index.
    """
    k = model.config.classes
    logits = predict(model, split.views, batch_size)
    pred = np.argmax(logits, axis=1)
    labels = np.asarray(split.labels)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    acc = float((pred == labels).mean()) if len(labels) else 0.0
    return acc, conf


def check_geometry(model: MVTModel, geometry: dict) -> None:
    c = model.config
    want = {"views": c.views, "width": c.width, "height": c.height, "channels": c.channels}
    got = {k: geometry.get(k) for k in want}
    if got != want:
        raise ConfigError(f"dataset geometry {got} does not match model geometry {want}")


def _metrics_csv(history: list[Metrics], zero_seconds: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in history:
        secs = 0.0 if zero_seconds else m.seconds
        w.writerow([m.epoch, repr(m.train_loss), repr(m.train_acc), repr(m.val_acc),
                    f"{secs:.3f}", m.flops_fwd])
    return buf.getvalue()


def _split_geometry(split) -> dict:
    _, L, W, H, C = split.views.shape
    return {"views": L, "width": W, "height": H, "channels": C}


def train(model: MVTModel, train_split, val_split, cfg: TrainConfig,
          out_dir=None) -> list[Metrics]:
    """Train in place; writes metrics.csv, best.ckpt and last.ckpt when ``out_dir`` is set.

    Batches are drawn from a permutation stream seeded by ``cfg.seed``; one
    sample is one object with all its views.
    """
    check_geometry(model, _split_geometry(train_split))
    check_geometry(model, _split_geometry(val_split))
    k = model.config.classes
    for s in (train_split, val_split):
        if len(s.labels) and int(np.max(s.labels)) >= k:
            raise ConfigError(f"labels reach {int(np.max(s.labels))} but the model has {k} classes")
    zero_seconds = cfg.deterministic_log
    if zero_seconds is None:
        zero_seconds = model.config.dtype == "float64"
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = model.params
    state = AdamWState()
    rng = np.random.default_rng(cfg.seed)
    flops = attention_flops(model.config)["total"]
    dtype = model.config.np_dtype
    xs = train_split.views.astype(dtype, copy=False)
    ys = np.asarray(train_split.labels)
    n = len(ys)
    history: list[Metrics] = []
    best = -1.0
    static_bytes = params.nbytes() * 2
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        loss_sum, correct, peak = 0.0, 0, 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            params.zero_grad()
            with Tape() as tape:
                logits = forward(model, xs[idx])
                loss = cross_entropy(logits, ys[idx])
            if not np.isfinite(loss.data).all():
                raise NumericError(f"non-finite loss at epoch {epoch}")
            T.backward(tape, loss)
            peak = max(peak, tape.nbytes())
            del tape
            adamw_step(params, params.grads(), state, cfg)
            loss_sum += float(loss.data) * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == ys[idx]).sum())
        params.zero_grad()
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            val_acc, _ = evaluate(model, val_split)
        else:
            val_acc = history[-1].val_acc if history else float("nan")
        m = Metrics(epoch, loss_sum / n, correct / n, val_acc, time.perf_counter() - t0, flops,
                    peak + static_bytes + state.nbytes())
        history.append(m)
        log.info("epoch=%d train_loss=%.6f train_acc=%.4f val_acc=%.4f seconds=%.2f",
                 m.epoch, m.train_loss, m.train_acc, m.val_acc, m.seconds)
        if out is not None:
            meta = {"epoch": epoch, "val_acc": val_acc, "train": cfg.to_dict()}
            if val_acc > best:
                best = val_acc
                save_checkpoint(out / "best.ckpt", model, meta)
            save_checkpoint(out / "last.ckpt", model, meta)
            (out / "metrics.csv").write_text(_metrics_csv(history, zero_seconds))
    if out is not None and not history:
        save_checkpoint(out / "last.ckpt", model, {"epoch": 0})
        save_checkpoint(out / "best.ckpt", model, {"epoch": 0})
        (out / "metrics.csv").write_text(_metrics_csv(history, zero_seconds))
    return history


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def verify_checkpoint(path, split, expected_acc: float) -> bool:
    """Reload a checkpoint and confirm it reproduces ``expected_acc`` exactly."""
    model, _ = load_checkpoint(path)
    acc, _ = evaluate(model, split)
    return acc == expected_acc
