"""Multi-view vision transformer: per-view local blocks followed by global blocks.

Token layout. Each view of W x H x C pixels is cut into a (W/p) x (H/p) grid of
p x p patches, numbered row-major. A patch is flattened in (row, col, channel)
order. Every view contributes ``n = w*h + 1`` tokens, class token first. After
the local stage the views are stacked view-major into one set of ``L*n``
tokens for the global stage.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import BlockWeights, block_diagonal_mask, block_forward, init_block, trunc_normal
from .errors import ConfigError, FormatError
from .tensor import ParamStore, Tensor

POOLING_MODES = ("cls", "avg")


@dataclass(frozen=True)
class MVTConfig:
    views: int = 6
    width: int = 32
    height: int = 32
    channels: int = 1
    patch: int = 8
    dim: int = 64
    heads: int = 4
    local_blocks: int = 2
    global_blocks: int = 1
    classes: int = 6
    mlp_ratio: int = 4
    dtype: str = "float32"
    pooling: str = "cls"
    attn_scale: str = "head"
    head_hidden: int = 0
    per_view_cls: bool = False
    ln_eps: float | None = None

    def __post_init__(self):
        for name in ("views", "width", "height", "channels", "patch", "dim", "heads", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.local_blocks < 0 or self.global_blocks < 0:
            raise ConfigError("block counts must be >= 0")
        if self.width % self.patch or self.height % self.patch:
            raise ConfigError(f"view {self.width}x{self.height} is not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.mlp_ratio < 2:
            raise ConfigError("mlp_ratio must exceed 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}")
        if self.attn_scale not in ("head", "full"):
            raise ConfigError("attn_scale must be 'head' or 'full'")

    @property
    def grid(self) -> tuple[int, int]:
        return self.width // self.patch, self.height // self.patch

    @property
    def patches_per_view(self) -> int:
        w, h = self.grid
        return w * h

    @property
    def tokens_per_view(self) -> int:
        return self.patches_per_view + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def eps(self) -> float:
        if self.ln_eps is not None:
            return self.ln_eps
        return 1e-12 if self.dtype == "float64" else 1e-5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MVTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "MVTConfig":
        return replace(self, **kw)


PRESETS: dict[str, MVTConfig] = {
    "micro": MVTConfig(views=2, width=4, height=4, patch=2, dim=8, heads=2,
                       local_blocks=1, global_blocks=1, classes=3),
    "toy": MVTConfig(),
    "tiny": MVTConfig(dim=192, heads=3, local_blocks=8, global_blocks=4),
    "small": MVTConfig(dim=384, heads=6, local_blocks=8, global_blocks=4),
}


def preset(name: str, **overrides) -> MVTConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides) if overrides else base


def param_count(cfg: MVTConfig) -> int:
    """Closed-form number of scalar parameters."""
    d, r = cfg.dim, cfg.mlp_ratio
    embed = d * cfg.patch_dim + cfg.tokens_per_view * d + d * (cfg.views if cfg.per_view_cls else 1)
    block = 4 * (d * d + d) + 2 * 2 * d + (d * r * d + r * d) + (r * d * d + d)
    if cfg.head_hidden:
        hh = cfg.head_hidden
        head = d * hh + hh + hh * cfg.classes + cfg.classes
    else:
        head = cfg.classes * d + cfg.classes
    return embed + (cfg.local_blocks + cfg.global_blocks) * block + head


def _block_flops(tokens: int, groups: int, d: int, r: int) -> dict[str, int]:
    # 2 FLOPs per multiply-accumulate, matrix products only
    return {
        "projections": groups * 4 * 2 * tokens * d * d,
        "scores": groups * 2 * tokens * tokens * d,
        "mixing": groups * 2 * tokens * tokens * d,
        "mlp": groups * 2 * 2 * tokens * d * r * d,
    }


def attention_flops(cfg: MVTConfig) -> dict:
    """Forward FLOPs for one object (all L views), counting matrix products only.

    With n tokens per view, a local block runs L independent attentions over n
    tokens; a global block runs one attention over L*n tokens. So projection
    and MLP costs match between the two while the quadratic score/mixing terms
    of a global block are exactly L times those of a local block.
    """
    L, n, d, r = cfg.views, cfg.tokens_per_view, cfg.dim, cfg.mlp_ratio
    local = _block_flops(n, L, d, r)
    glob = _block_flops(L * n, 1, d, r)
    local["total"] = sum(local.values())
    glob["total"] = sum(glob.values())
    embed = 2 * L * cfg.patches_per_view * cfg.patch_dim * d
    if cfg.head_hidden:
        head = 2 * (d * cfg.head_hidden + cfg.head_hidden * cfg.classes)
    else:
        head = 2 * d * cfg.classes
    local_total = cfg.local_blocks * local["total"]
    global_total = cfg.global_blocks * glob["total"]
    return {
        "local_block": local,
        "global_block": glob,
        "embed": embed,
        "head": head,
        "local_total": local_total,
        "global_total": global_total,
        "total": embed + local_total + global_total + head,
    }


def init_params(cfg: MVTConfig, seed: int = 0) -> ParamStore:
    """Truncated-normal(0.02) matrices and embeddings, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    d = cfg.dim
    p = ParamStore()
    p["embed.w0"] = Tensor(trunc_normal(rng, (d, cfg.patch_dim), 0.02, dt))
    p["embed.pos"] = Tensor(trunc_normal(rng, (cfg.tokens_per_view, d), 0.02, dt))
    cls_shape = (cfg.views, d) if cfg.per_view_cls else (d,)
    p["embed.cls"] = Tensor(trunc_normal(rng, cls_shape, 0.02, dt))
    for s in range(cfg.local_blocks):
        init_block(p, f"local.{s}", d, rng, dt, cfg.mlp_ratio)
    for t in range(cfg.global_blocks):
        init_block(p, f"global.{t}", d, rng, dt, cfg.mlp_ratio)
    if cfg.head_hidden:
        p["head.w1"] = Tensor(trunc_normal(rng, (cfg.head_hidden, d), 0.02, dt))
        p["head.b1"] = Tensor(np.zeros(cfg.head_hidden, dt))
        p["head.w"] = Tensor(trunc_normal(rng, (cfg.classes, cfg.head_hidden), 0.02, dt))
    else:
        p["head.w"] = Tensor(trunc_normal(rng, (cfg.classes, d), 0.02, dt))
    p["head.b"] = Tensor(np.zeros(cfg.classes, dt))
    return p


@dataclass
class EmbedWeights:
    w0: Tensor
    pos: Tensor
    cls: Tensor


@dataclass
class MVTModel:
    config: MVTConfig
    params: ParamStore = field(default=None)

    @classmethod
    def create(cls, config: MVTConfig, seed: int = 0) -> "MVTModel":
        return cls(config, init_params(config, seed))

    @property
    def embed(self) -> EmbedWeights:
        p = self.params
        return EmbedWeights(p["embed.w0"], p["embed.pos"], p["embed.cls"])

    def _block(self, prefix: str) -> BlockWeights:
        c = self.config
        return BlockWeights.from_store(self.params, prefix, c.heads, c.eps, c.attn_scale)

    @property
    def local(self) -> list[BlockWeights]:
        return [self._block(f"local.{s}") for s in range(self.config.local_blocks)]

    @property
    def global_(self) -> list[BlockWeights]:
        return [self._block(f"global.{t}") for t in range(self.config.global_blocks)]

    def num_params(self) -> int:
        return self.params.numel()

    def __call__(self, views) -> Tensor:
        return forward(self, views)


# --- stages ----------------------------------------------------------------

def patchify_array(pixels: np.ndarray, p: int) -> np.ndarray:
    """(..., W, H, C) pixels -> (..., w*h, C*p*p) row-major patches."""
    *lead, W, H, C = pixels.shape
    if W % p or H % p:
        raise ConfigError(f"view {W}x{H} is not divisible by patch {p}")
    w, h = W // p, H // p
    k = len(lead)
    x = pixels.reshape(*lead, w, p, h, p, C)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, w * h, p * p * C)


def patchify(view, p: int) -> Tensor:
    arr = view.data if isinstance(view, Tensor) else np.asarray(view)
    if arr.ndim == 2:
        arr = arr[..., None]
    return Tensor(patchify_array(arr, p))


def _embed_patches(patches: Tensor, emb: EmbedWeights, per_view_cls: bool) -> Tensor:
    """(B, L, wh, P) patches -> (B, L, n, D) token matrices."""
    B, L, wh, _ = patches.shape
    d = emb.w0.shape[0]
    x = T.matmul(patches, T.transpose(emb.w0))
    dt = patches.dtype
    if per_view_cls:
        cls_rows = Tensor(np.zeros((B, L * d), dt)) + T.reshape(emb.cls, (L * d,))
    else:
        cls_rows = Tensor(np.zeros((B * L, d), dt)) + emb.cls
    cls_rows = T.reshape(cls_rows, (B, L, 1, d))
    z = T.concat([cls_rows, x], axis=2)
    n = wh + 1
    z = T.reshape(z, (B * L, n * d)) + T.reshape(emb.pos, (n * d,))
    return T.reshape(z, (B, L, n, d))


def embed_view(view, emb: EmbedWeights, patch: int) -> Tensor:
    """One view -> its (w*h + 1) x D token matrix, class token in row 0."""
    P = patchify(view, patch)
    P = Tensor(P.data.astype(emb.w0.dtype)[None, None])
    z = _embed_patches(P, emb, per_view_cls=False)
    return T.reshape(z, z.shape[2:])


def local_encode(views, blocks: list[BlockWeights]):
    """Run the shared local blocks on each view independently.

    ``views`` is a list of n x D matrices or a stacked (..., n, D) tensor.
    """
    if isinstance(views, (list, tuple)):
        stacked = T.concat([T.reshape(v, (1, *v.shape)) for v in views], axis=0)
        out = local_encode(stacked, blocks)
        return [T.reshape(out[j], out.shape[1:]) for j in range(len(views))]
    z = views
    for w in blocks:
        z = block_forward(z, w)
    return z


def concat_views(views) -> Tensor:
    return T.concat(list(views), axis=0)


def split_views(m: Tensor, views: int) -> list[Tensor]:
    n = m.shape[0] // views
    return [m[j * n:(j + 1) * n] for j in range(views)]


def global_encode(m: Tensor, blocks: list[BlockWeights], mask: np.ndarray | None = None) -> Tensor:
    for w in blocks:
        m = block_forward(m, w, mask)
    return m


def _head(m: Tensor, params: ParamStore) -> Tensor:
    vector = m.ndim == 1
    if vector:
        m = T.reshape(m, (1, m.shape[0]))
    if "head.w1" in params:
        m = T.gelu(T.matmul(m, T.transpose(params["head.w1"])) + params["head.b1"])
    out = T.matmul(m, T.transpose(params["head.w"])) + params["head.b"]
    return T.reshape(out, out.shape[1:]) if vector else out


def pool(m_t: Tensor, views: int, mode: str = "cls") -> Tensor:
    """(..., L*n, D) global output -> (..., D) object representation.

    ``cls`` averages the L attended class tokens; ``avg`` averages every
    attended patch token and leaves the class tokens out.
    """
    *lead, ln, d = m_t.shape
    n = ln // views
    x = T.reshape(m_t, (*lead, views, n, d))
    k = len(lead)
    if mode == "cls":
        idx = (slice(None),) * k + (slice(None), 0, slice(None))
        return T.mean(x[idx], axis=k)
    if mode == "avg":
        idx = (slice(None),) * k + (slice(None), slice(1, None), slice(None))
        patches = T.reshape(x[idx], (*lead, views * (n - 1), d))
        return T.mean(patches, axis=k)
    raise ConfigError(f"unknown pooling mode {mode!r}")


def pool_and_classify(m_t: Tensor, model: MVTModel, mode: str | None = None) -> Tensor:
    mode = mode or model.config.pooling
    return _head(pool(m_t, model.config.views, mode), model.params)


def _check_views(cfg: MVTConfig, arr: np.ndarray) -> None:
    want = (cfg.views, cfg.width, cfg.height, cfg.channels)
    if arr.shape[-4:] != want:
        raise ConfigError(f"expected views of shape {want}, got {arr.shape[-4:]}")


def _as_pixels(views, cfg: MVTConfig) -> np.ndarray:
    if isinstance(views, (list, tuple)):
        arr = np.stack([v.data if isinstance(v, Tensor) else np.asarray(v) for v in views])
    else:
        arr = views.data if isinstance(views, Tensor) else np.asarray(views)
    if arr.ndim == 3 and cfg.channels == 1 and arr.shape[0] == cfg.views:
        arr = arr[..., None]
    return arr


def forward(model: MVTModel, views, mask_global: bool = False, pooling: str | None = None) -> Tensor:
    """Logits for one object (L, W, H, C) -> (K,) or a batch (B, L, W, H, C) -> (B, K).

    ``mask_global`` restricts the global blocks to a block-diagonal per-view
    mask, turning them into local blocks.
    """
    cfg = model.config
    arr = _as_pixels(views, cfg)
    single = arr.ndim == 4
    if single:
        arr = arr[None]
    if arr.ndim != 5:
        raise ConfigError(f"expected (L, W, H, C) or (B, L, W, H, C) views, got {arr.shape}")
    _check_views(cfg, arr)
    B, L = arr.shape[:2]
    n, d = cfg.tokens_per_view, cfg.dim
    patches = Tensor(patchify_array(arr.astype(cfg.np_dtype, copy=False), cfg.patch))
    z = _embed_patches(patches, model.embed, cfg.per_view_cls)
    z = local_encode(T.reshape(z, (B * L, n, d)), model.local)
    m = T.reshape(z, (B, L * n, d))
    mask = block_diagonal_mask([n] * L) if mask_global else None
    m = global_encode(m, model.global_, mask)
    logits = pool_and_classify(m, model, pooling)
    return T.reshape(logits, (cfg.classes,)) if single else logits


# --- checkpoint ------------------------------------------------------------

CKPT_MAGIC = b"MVTC"
CKPT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_checkpoint(path, model: MVTModel, meta: dict | None = None) -> None:
    """Little-endian container: magic, version, JSON header, tensors, SHA-256 trailer."""
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}},
                        sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header,
             struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        key = name.encode()
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack("<BI", _DTYPE_TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload + hashlib.sha256(payload).digest())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[MVTModel, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 44 or raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not an MVTC checkpoint")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch")
    r = _Reader(payload)
    r.take(4)
    version, hlen = r.unpack("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(r.take(hlen))
    cfg = MVTConfig.from_dict(header["config"])
    (count,) = r.unpack("<I")
    params = ParamStore()
    for _ in range(count):
        (klen,) = r.unpack("<I")
        name = r.take(klen).decode()
        tag, ndim = r.unpack("<BI")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"{path}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I")
        dt = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        params[name] = Tensor(arr)
    if r.pos != len(payload):
        raise FormatError(f"{path}: trailing bytes after tensors")
    return MVTModel(cfg, params), header.get("meta", {})
