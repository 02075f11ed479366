"""Transformer primitives: multi-head self-attention, layer norm, MLP, pre-norm block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import ParamStore, Tensor

MASK_BIAS = -1e30


@dataclass
class LNParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if not self.eps > 0:
            raise ContractError(f"layer norm eps must be positive, got {self.eps}")


@dataclass
class MSAWeights:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int
    # "head" scales scores by sqrt(D / heads); "full" by sqrt(D)
    scale_mode: str = "head"

    def __post_init__(self):
        d = self.wq.shape[0]
        if self.heads < 1 or d % self.heads:
            raise DimensionError(f"width {d} is not divisible by {self.heads} heads")


@dataclass
class MLPWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def ratio(self) -> float:
        return self.w1.shape[1] / self.w1.shape[0]


@dataclass
class BlockWeights:
    ln1: LNParams
    msa: MSAWeights
    ln2: LNParams
    mlp: MLPWeights

    @classmethod
    def from_store(cls, params: ParamStore, prefix: str, heads: int, eps: float,
                   scale_mode: str = "head") -> "BlockWeights":
        p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
        return cls(
            ln1=LNParams(p("ln1.gamma"), p("ln1.beta"), eps),
            msa=MSAWeights(p("msa.wq"), p("msa.bq"), p("msa.wk"), p("msa.bk"),
                           p("msa.wv"), p("msa.bv"), p("msa.wo"), p("msa.bo"),
                           heads, scale_mode),
            ln2=LNParams(p("ln2.gamma"), p("ln2.beta"), eps),
            mlp=MLPWeights(p("mlp.w1"), p("mlp.b1"), p("mlp.w2"), p("mlp.b2")),
        )


def block_param_shapes(width: int, ratio: int = 4) -> dict[str, tuple[int, ...]]:
    hidden = ratio * width
    shapes = {"ln1.gamma": (width,), "ln1.beta": (width,),
              "ln2.gamma": (width,), "ln2.beta": (width,),
              "mlp.w1": (width, hidden), "mlp.b1": (hidden,),
              "mlp.w2": (hidden, width), "mlp.b2": (width,)}
    for n in "qkvo":
        shapes[f"msa.w{n}"] = (width, width)
        shapes[f"msa.b{n}"] = (width,)
    return shapes


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) redrawn until every sample lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_block(params: ParamStore, prefix: str, width: int, rng: np.random.Generator,
               dtype=np.float32, ratio: int = 4, std: float = 0.02) -> None:
    for name, shape in block_param_shapes(width, ratio).items():
        if name.endswith("gamma"):
            arr = np.ones(shape, dtype)
        elif len(shape) == 2:
            arr = trunc_normal(rng, shape, std, dtype)
        else:
            arr = np.zeros(shape, dtype)
        params[f"{prefix}.{name}"] = Tensor(arr)


def ln_forward(x: Tensor, p: LNParams) -> Tensor:
    return T.layer_norm(x, p.gamma, p.beta, p.eps)


def mask_bias(mask: np.ndarray, dtype) -> np.ndarray:
    """Lower a boolean allow-matrix to an additive score bias."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise DimensionError(f"attention mask must be square, got {mask.shape}")
    if not mask.any(axis=1).all():
        raise ContractError("attention mask has a row with no allowed positions")
    return np.where(mask, 0.0, MASK_BIAS).astype(dtype)


def block_diagonal_mask(group_sizes) -> np.ndarray:
    """Allow-matrix letting each token attend only within its own group."""
    n = int(sum(group_sizes))
    mask = np.zeros((n, n), dtype=bool)
    start = 0
    for g in group_sizes:
        mask[start:start + g, start:start + g] = True
        start += g
    return mask


def attention_weights(x: Tensor, w: MSAWeights, mask: np.ndarray | None = None):
    """Per-head attention probabilities, shape (..., heads, N, N), plus the value heads."""
    *lead, n, d = x.shape
    heads = w.heads
    dh = d // heads

    def split(z: Tensor) -> Tensor:
        z = T.reshape(z, (*lead, n, heads, dh))
        k = len(lead)
        return T.transpose(z, (*range(k), k + 1, k, k + 2))

    q = split(T.matmul(x, w.wq) + w.bq)
    k = split(T.matmul(x, w.wk) + w.bk)
    v = split(T.matmul(x, w.wv) + w.bv)
    kt = T.transpose(k, (*range(len(lead) + 1), len(lead) + 2, len(lead) + 1))
    denom = math.sqrt(dh if w.scale_mode == "head" else d)
    scores = T.scale(T.bmm(q, kt), 1.0 / denom)
    if mask is not None:
        if np.shape(mask) != (n, n):
            raise DimensionError(f"mask {np.shape(mask)} does not match {n} tokens")
        bias = Tensor(mask_bias(mask, x.dtype).reshape(-1))
        flat = T.reshape(scores, (-1, n * n))
        scores = T.reshape(flat + bias, scores.shape)
    return T.softmax_rows(scores), v


def msa_forward(x: Tensor, w: MSAWeights, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention over the second-to-last axis of ``x`` (..., N, D).

    Leading axes are independent token sets. ``mask`` is an optional N x N
    boolean allow-matrix shared by every set.
    """
    *lead, n, d = x.shape
    attn, v = attention_weights(x, w, mask)
    y = T.bmm(attn, v)
    k = len(lead)
    y = T.transpose(y, (*range(k), k + 1, k, k + 2))
    y = T.reshape(y, (*lead, n, d))
    return T.matmul(y, w.wo) + w.bo


def mlp_forward(x: Tensor, w: MLPWeights) -> Tensor:
    h = T.gelu(T.matmul(x, w.w1) + w.b1)
    return T.matmul(h, w.w2) + w.b2


def block_forward(x: Tensor, w: BlockWeights, mask: np.ndarray | None = None) -> Tensor:
    x = x + msa_forward(ln_forward(x, w.ln1), w.msa, mask)
    return x + mlp_forward(ln_forward(x, w.ln2), w.mlp)
