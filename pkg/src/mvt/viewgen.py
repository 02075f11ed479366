"""Procedural multi-view silhouettes of parametric solids.

Each object is one of six solids with random size, orientation and scale.
Cameras sit on an azimuth circuit at a fixed elevation and look at the origin
with an orthographic projection. A sub-pixel ray is foreground when any sample
along it falls inside the solid. Each pixel averages a small grid of sub-pixel
rays, and the result is box-blurred by one pixel.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError, MVTError

CLASSES = ("sphere", "box", "cylinder", "cone", "torus", "cross")
ELEVATION_DEG = 30.0
IMAGE_HALF_EXTENT = 1.3
RAY_SAMPLES = 97
SUPERSAMPLE = 3
MAX_FOREGROUND = 0.9
MAX_ATTEMPTS = 200
DATA_MAGIC = b"MVTD"
DATA_VERSION = 1
SPLITS = ("train", "val", "test")

# per-category size ranges; every solid fits inside the image at max scale
SIZE_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "sphere": {"radius": (0.55, 0.9)},
    "box": {"a": (0.3, 0.65), "b": (0.3, 0.65), "c": (0.3, 0.65)},
    "cylinder": {"radius": (0.25, 0.5), "half_height": (0.45, 0.85)},
    "cone": {"radius": (0.4, 0.65), "height": (1.1, 1.6)},
    "torus": {"major": (0.5, 0.7), "minor": (0.15, 0.28)},
    "cross": {"half_length": (0.6, 0.9), "half_width": (0.1, 0.2)},
}
SCALE_RANGE = (0.85, 1.1)


class DegenerateShapeError(MVTError, ValueError):
    """A rendered view has no foreground pixel."""


@dataclass
class ShapeSpec:
    category: str
    sizes: dict[str, float]
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    scale: float = 1.0

    def __post_init__(self):
        if self.category not in CLASSES:
            raise ConfigError(f"unknown category {self.category!r}")
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-9:
            raise ConfigError("rotation quaternion must be unit-norm")

    @property
    def label(self) -> int:
        return CLASSES.index(self.category)


@dataclass
class ViewSet:
    views: np.ndarray  # (L, W, H, C) float32 in [0, 1]
    label: int
    shape_id: int = -1
    seed: int = -1


def sample_spec(rng: np.random.Generator, category: str) -> ShapeSpec:
    sizes = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in SIZE_RANGES[category].items()}
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return ShapeSpec(category, sizes, q, float(rng.uniform(*SCALE_RANGE)))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def inside(category: str, sizes: dict[str, float], q: np.ndarray) -> np.ndarray:
    """Boolean inside test for points ``q[..., 3]`` in the solid's own frame."""
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    s = sizes
    if category == "sphere":
        return x * x + y * y + z * z <= s["radius"] ** 2
    if category == "box":
        return (np.abs(x) <= s["a"]) & (np.abs(y) <= s["b"]) & (np.abs(z) <= s["c"])
    if category == "cylinder":
        return (x * x + y * y <= s["radius"] ** 2) & (np.abs(z) <= s["half_height"])
    if category == "cone":
        h = s["height"]
        r = s["radius"] * (0.5 - z / h)
        return (np.abs(z) <= h / 2) & (x * x + y * y <= r * r)
    if category == "torus":
        rho = np.sqrt(x * x + y * y) - s["major"]
        return rho * rho + z * z <= s["minor"] ** 2
    if category == "cross":
        l, w = s["half_length"], s["half_width"]
        ax, ay, az = np.abs(x), np.abs(y), np.abs(z)
        return (((ax <= l) & (ay <= w) & (az <= w)) | ((ay <= l) & (ax <= w) & (az <= w))
                | ((az <= l) & (ax <= w) & (ay <= w)))
    raise ConfigError(f"unknown category {category!r}")


def camera_frames(views: int, elevation_deg: float = ELEVATION_DEG):
    """Per-view (right, up, toward-camera) unit vectors on an azimuth circuit."""
    e = math.radians(elevation_deg)
    frames = []
    for j in range(views):
        phi = 2.0 * math.pi * j / views
        c, s = math.cos(phi), math.sin(phi)
        fwd = np.array([math.cos(e) * c, math.cos(e) * s, math.sin(e)])
        right = np.array([-s, c, 0.0])
        up = np.array([-math.sin(e) * c, -math.sin(e) * s, math.cos(e)])
        frames.append((right, up, fwd))
    return frames


def pixel_coords(n: int) -> np.ndarray:
    """Centres of n pixels spanning [-extent, extent], symmetric about zero."""
    return (2.0 * np.arange(n) + 1.0 - n) / n * IMAGE_HALF_EXTENT


def bounding_radius(category: str, sizes: dict[str, float]) -> float:
    """Radius of a sphere about the origin enclosing the unscaled solid."""
    s = sizes
    if category == "sphere":
        return s["radius"]
    if category == "box":
        return math.sqrt(s["a"] ** 2 + s["b"] ** 2 + s["c"] ** 2)
    if category == "cylinder":
        return math.hypot(s["radius"], s["half_height"])
    if category == "cone":
        return math.hypot(s["radius"], s["height"] / 2)
    if category == "torus":
        return s["major"] + s["minor"]
    if category == "cross":
        return math.sqrt(s["half_length"] ** 2 + 2 * s["half_width"] ** 2)
    raise ConfigError(f"unknown category {category!r}")


def silhouettes(spec: ShapeSpec, views: int, width: int, height: int,
                samples: int = RAY_SAMPLES) -> np.ndarray:
    """Binary masks (L, W, H): rows run top to bottom, columns left to right.

    Rays are marched only across the solid's bounding sphere, and pixels whose
    ray misses that sphere are skipped.
    """
    reach = spec.scale * bounding_radius(spec.category, spec.sizes) * (1 + 1e-9)
    v = -pixel_coords(width)  # image rows go downwards
    u = pixel_coords(height)
    vv, uu = np.meshgrid(v, u, indexing="ij")
    near = vv * vv + uu * uu <= reach * reach
    rv, ru = vv[near], uu[near]
    t = np.linspace(-reach, reach, samples)
    inv = quat_to_matrix(spec.rotation).T / spec.scale
    out = np.zeros((views, width, height), dtype=bool)
    for j, (right, up, fwd) in enumerate(camera_frames(views)):
        # local-frame basis vectors so points are built directly in object coordinates
        r, w, f = inv @ right, inv @ up, inv @ fwd
        pts = (rv[:, None, None] * w + ru[:, None, None] * r + t[None, :, None] * f)
        out[j][near] = inside(spec.category, spec.sizes, pts).any(axis=-1)
    return out


def hit_counts(spec: ShapeSpec, views: int, width: int, height: int,
               supersample: int = SUPERSAMPLE, samples: int = RAY_SAMPLES) -> np.ndarray:
    """Number of each pixel's ``supersample**2`` sub-pixel rays that hit the solid."""
    masks = silhouettes(spec, views, width * supersample, height * supersample, samples)
    f = supersample
    return masks.reshape(views, width, f, height, f).sum(axis=(2, 4))


def box_blur(counts: np.ndarray) -> np.ndarray:
    """3x3 zero-padded box sum over the last two axes; exact for integer input."""
    w, h = counts.shape[-2:]
    padded = np.pad(counts, [(0, 0)] * (counts.ndim - 2) + [(1, 1), (1, 1)])
    return sum(padded[..., i:i + w, j:j + h] for i in range(3) for j in range(3))


def render_views(spec: ShapeSpec, views: int, width: int = 32, height: int = 32,
                 shape_id: int = -1, seed: int = -1) -> ViewSet:
    if views < 1:
        raise ConfigError("need at least one view")
    counts = hit_counts(spec, views, width, height)
    if not counts.reshape(views, -1).any(axis=1).all():
        raise DegenerateShapeError(f"{spec.category} has an empty view")
    return ViewSet(_image(counts), spec.label, shape_id, seed)


def _image(counts: np.ndarray) -> np.ndarray:
    # integer sums keep mirror-symmetric silhouettes bit-identical after the blur
    return (box_blur(counts) / (9 * SUPERSAMPLE**2)).astype(np.float32)[..., None]


def foreground_fraction(spec: ShapeSpec, views: int, width: int, height: int) -> np.ndarray:
    """Per-view share of pixels touched by the silhouette before blurring."""
    counts = hit_counts(spec, views, width, height)
    return (counts > 0).reshape(views, -1).mean(axis=1)


# --- dataset ---------------------------------------------------------------

@dataclass
class Split:
    name: str
    views: np.ndarray  # (N, L, W, H, C)
    labels: np.ndarray  # (N,) int
    shape_ids: np.ndarray  # (N,) int

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[ViewSet]:
        for i in range(len(self)):
            yield ViewSet(self.views[i], int(self.labels[i]), int(self.shape_ids[i]))

    def with_views(self, count: int) -> "Split":
        """Keep ``count`` views spread evenly over the rendered azimuth circuit."""
        return Split(self.name, subset_views(self.views, count), self.labels, self.shape_ids)


@dataclass
class Dataset:
    path: Path
    manifest: dict
    splits: dict[str, Split]

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]

    def __iter__(self) -> Iterator[ViewSet]:
        for name in SPLITS:
            if name in self.splits:
                yield from self.splits[name]

    @property
    def geometry(self) -> dict:
        return self.manifest["geometry"]


def subset_views(views: np.ndarray, count: int) -> np.ndarray:
    total = views.shape[1]
    if count < 1 or count > total:
        raise ConfigError(f"cannot take {count} views from {total} rendered views")
    idx = [j * total // count for j in range(count)]
    return views[:, idx]


def balanced_labels(count: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(count) % classes
    return labels[rng.permutation(count)]


def render_object(seed: int, shape_id: int, label: int, views: int, width: int,
                  height: int) -> ViewSet:
    """Render one object, redrawing its pose until every view is non-empty and
    below ``MAX_FOREGROUND`` coverage."""
    rng = np.random.default_rng([seed, shape_id])
    for _ in range(MAX_ATTEMPTS):
        spec = sample_spec(rng, CLASSES[label])
        counts = hit_counts(spec, views, width, height)
        fg = (counts > 0).reshape(views, -1).mean(axis=1)
        if (fg > 0).all() and (fg < MAX_FOREGROUND).all():
            return ViewSet(_image(counts), spec.label, shape_id, seed)
    raise ConfigError(f"could not render a usable {CLASSES[label]} at {width}x{height} "
                      f"after {MAX_ATTEMPTS} draws")


def _write_split(path: Path, split: Split) -> str:
    n = len(split)
    _, L, W, H, C = split.views.shape
    buf = b"".join([
        DATA_MAGIC,
        struct.pack("<6I", DATA_VERSION, n, L, W, H, C),
        split.labels.astype("<i4").tobytes(),
        split.shape_ids.astype("<i8").tobytes(),
        np.ascontiguousarray(split.views, dtype="<f4").tobytes(),
    ])
    try:
        path.write_bytes(buf)
    except OSError as e:
        raise OSError(f"{path}: {e.strerror}") from e
    return hashlib.sha256(buf).hexdigest()


def make_dataset(out, seed: int, counts: dict[str, int], views: int = 6, width: int = 32,
                 height: int = 32, classes: int = len(CLASSES)) -> dict:
    """Render and persist a class-balanced dataset; returns its manifest.

    Shape ids run consecutively over train, val and test, and each object is
    rendered from its own ``(seed, shape_id)`` random stream.
    """
    if not 1 <= classes <= len(CLASSES):
        raise ConfigError(f"classes must be in [1, {len(CLASSES)}]")
    for name in SPLITS:
        if counts.get(name, 0) < 1:
            raise ConfigError(f"split {name!r} needs at least one sample")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"{out}: {e.strerror}") from e
    files = {}
    next_id = 0
    for si, name in enumerate(SPLITS):
        n = counts[name]
        labels = balanced_labels(n, classes, np.random.default_rng([seed, 1_000_003, si]))
        ids = np.arange(next_id, next_id + n, dtype=np.int64)
        next_id += n
        rendered = [render_object(seed, int(i), int(lab), views, width, height)
                    for i, lab in zip(ids, labels)]
        split = Split(name, np.stack([r.views for r in rendered]), labels, ids)
        digest = _write_split(out / f"{name}.mvtd", split)
        files[name] = {"file": f"{name}.mvtd", "sha256": digest}
    manifest = {
        "format_version": DATA_VERSION,
        "seed": seed,
        "classes": list(CLASSES[:classes]),
        "counts": {name: counts[name] for name in SPLITS},
        "geometry": {"views": views, "width": width, "height": height, "channels": 1},
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _read_split(path: Path, name: str, expected_sha: str | None) -> Split:
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise OSError(f"{path}: {e.strerror}") from e
    if expected_sha is not None and hashlib.sha256(buf).hexdigest() != expected_sha:
        raise FormatError(f"{path}: checksum mismatch")
    if len(buf) < 28 or buf[:4] != DATA_MAGIC:
        raise FormatError(f"{path}: not an MVTD file")
    version, n, L, W, H, C = struct.unpack("<6I", buf[4:28])
    if version != DATA_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    want = 28 + 4 * n + 8 * n + 4 * n * L * W * H * C
    if len(buf) != want:
        raise FormatError(f"{path}: expected {want} bytes, found {len(buf)}")
    off = 28
    labels = np.frombuffer(buf, "<i4", n, off).astype(np.int64)
    off += 4 * n
    ids = np.frombuffer(buf, "<i8", n, off).astype(np.int64)
    off += 8 * n
    views = np.frombuffer(buf, "<f4", n * L * W * H * C, off).astype(np.float32)
    return Split(name, views.reshape(n, L, W, H, C), labels, ids)


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as e:
        raise OSError(f"{mpath}: no such file") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{mpath}: invalid JSON ({e})") from e
    if manifest.get("format_version") != DATA_VERSION:
        raise FormatError(f"{mpath}: unsupported format version {manifest.get('format_version')}")
    splits = {}
    geo = manifest["geometry"]
    for name, entry in manifest["files"].items():
        split = _read_split(path / entry["file"], name, entry.get("sha256"))
        if split.views.shape[1:] != (geo["views"], geo["width"], geo["height"], geo["channels"]):
            raise FormatError(f"{entry['file']}: geometry disagrees with manifest")
        splits[name] = split
    return Dataset(path, manifest, splits)


def dataset_checksum(path) -> str:
    """SHA-256 over the manifest and all split files, in a fixed order."""
    path = Path(path)
    h = hashlib.sha256()
    for name in ["manifest.json"] + [f"{s}.mvtd" for s in SPLITS]:
        h.update(name.encode())
        h.update((path / name).read_bytes())
    return h.hexdigest()


# --- separability sanity baseline ------------------------------------------

def silhouette_features(views: np.ndarray) -> np.ndarray:
    """Per-object features from foreground area and boundary length of each view."""
    fg = views[..., 0] > 0.5
    pad = np.pad(fg, ((0, 0), (0, 0), (1, 1), (1, 1)))
    interior = pad[:, :, 1:-1, 1:-1] & pad[:, :, :-2, 1:-1] & pad[:, :, 2:, 1:-1] \
        & pad[:, :, 1:-1, :-2] & pad[:, :, 1:-1, 2:]
    area = fg.sum(axis=(2, 3)).astype(np.float64)
    perim = (fg & ~interior).sum(axis=(2, 3)).astype(np.float64)
    compact = perim ** 2 / np.maximum(area, 1.0)
    feats = [area.mean(1), area.std(1), perim.mean(1), perim.std(1), compact.mean(1), compact.std(1)]
    return np.stack(feats, axis=1)


def nearest_centroid_accuracy(train: Split, val: Split) -> float:
    ftr, fva = silhouette_features(train.views), silhouette_features(val.views)
    mu, sd = ftr.mean(0), ftr.std(0) + 1e-9
    ftr, fva = (ftr - mu) / sd, (fva - mu) / sd
    classes = np.unique(train.labels)
    cents = np.stack([ftr[train.labels == c].mean(0) for c in classes])
    dist = ((fva[:, None, :] - cents[None]) ** 2).sum(-1)
    pred = classes[dist.argmin(1)]
    return float((pred == val.labels).mean())
