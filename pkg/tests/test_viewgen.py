import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvt import viewgen as V
from mvt.errors import ConfigError, FormatError

from oracles import cylinder_coverage

# 4x4-supersampled exact ray/cylinder coverage for sample_spec(default_rng(123), "cylinder"),
# six views at 32x32; regenerate with oracles.cylinder_coverage(...).sum(axis=(1, 2))
CYLINDER_GOLDEN = [128.0, 167.875, 145.25, 171.25, 165.5, 169.375]


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    V.make_dataset(out, 7, {"train": 60, "val": 30, "test": 12})
    return out


def test_sphere_views_identical():
    rng = np.random.default_rng(0)
    for _ in range(3):
        spec = V.sample_spec(rng, "sphere")
        vs = V.render_views(spec, 5)
        for j in range(1, 5):
            np.testing.assert_array_equal(vs.views[j], vs.views[0])


def test_axis_aligned_box_views_mirror():
    spec = V.ShapeSpec("box", {"a": 0.6, "b": 0.35, "c": 0.45})
    vs = V.render_views(spec, 4)
    np.testing.assert_array_equal(vs.views[2], vs.views[0])
    np.testing.assert_array_equal(vs.views[0], vs.views[0][:, ::-1])
    np.testing.assert_array_equal(vs.views[3], vs.views[1])
    assert not np.array_equal(vs.views[0], vs.views[1])


def test_cylinder_golden_from_oracle():
    spec = V.sample_spec(np.random.default_rng(123), "cylinder")
    sums = V.render_views(spec, 6).views.sum(axis=(1, 2, 3))
    np.testing.assert_allclose(sums, CYLINDER_GOLDEN, rtol=0.02)


def test_golden_values_reproduce():
    spec = V.sample_spec(np.random.default_rng(123), "cylinder")
    cov = cylinder_coverage(spec.rotation, spec.scale, spec.sizes["radius"],
                            spec.sizes["half_height"], 6, 32)
    np.testing.assert_allclose(cov.sum(axis=(1, 2)), CYLINDER_GOLDEN, atol=1e-9)


def test_oracle_upright_cylinder_from_side():
    # seen at zero elevation an upright cylinder is a 2r x 2h rectangle
    r, h = 0.5, 0.65
    cov = cylinder_coverage(np.array([1.0, 0, 0, 0]), 1.0, r, h, 1, 26, elevation_deg=0.0)
    pixel = 2.6 / 26
    assert cov.sum() == pytest.approx((2 * r) * (2 * h) / pixel**2)


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(V.CLASSES))
def test_render_deterministic_and_bounded(seed, category):
    spec = V.sample_spec(np.random.default_rng(seed), category)
    a = V.render_views(spec, 3, 16, 16)
    b = V.render_views(spec, 3, 16, 16)
    np.testing.assert_array_equal(a.views, b.views)
    assert a.views.dtype == np.float32
    assert a.views.min() >= 0.0 and a.views.max() <= 1.0


def test_degenerate_view_raises():
    tiny = V.ShapeSpec("sphere", {"radius": 1e-4})
    with pytest.raises(V.DegenerateShapeError):
        V.render_views(tiny, 2, 8, 8)


def test_zero_views_rejected():
    with pytest.raises(ConfigError):
        V.render_views(V.ShapeSpec("sphere", {"radius": 0.5}), 0)


def test_non_unit_quaternion_rejected():
    with pytest.raises(ConfigError):
        V.ShapeSpec("box", {"a": 0.5, "b": 0.5, "c": 0.5}, np.array([1.0, 0.1, 0, 0]))


def test_bounding_radius_encloses_solid():
    rng = np.random.default_rng(5)
    for category in V.CLASSES:
        spec = V.sample_spec(rng, category)
        rb = V.bounding_radius(category, spec.sizes)
        pts = rng.uniform(-1.5, 1.5, size=(20000, 3))
        hit = V.inside(category, spec.sizes, pts)
        assert hit.any()
        assert np.linalg.norm(pts[hit], axis=1).max() <= rb


def test_same_seed_identical_checksums(tmp_path, small_data):
    V.make_dataset(tmp_path, 7, {"train": 60, "val": 30, "test": 12})
    for name in ("manifest.json", "train.mvtd", "val.mvtd", "test.mvtd"):
        assert (tmp_path / name).read_bytes() == (small_data / name).read_bytes()
    assert V.dataset_checksum(tmp_path) == V.dataset_checksum(small_data)


def test_other_seed_differs(tmp_path, small_data):
    V.make_dataset(tmp_path, 8, {"train": 60, "val": 30, "test": 12})
    assert V.dataset_checksum(tmp_path) != V.dataset_checksum(small_data)


def test_manifest_counts_and_geometry(small_data):
    manifest = json.loads((small_data / "manifest.json").read_text())
    assert manifest["counts"] == {"train": 60, "val": 30, "test": 12}
    assert manifest["geometry"] == {"views": 6, "width": 32, "height": 32, "channels": 1}
    assert manifest["classes"] == list(V.CLASSES)
    for name, entry in manifest["files"].items():
        digest = hashlib.sha256((small_data / entry["file"]).read_bytes()).hexdigest()
        assert digest == entry["sha256"]


def test_label_histograms_balanced(small_data):
    ds = V.load_dataset(small_data)
    for name in V.SPLITS:
        hist = np.bincount(ds[name].labels, minlength=6)
        assert hist.max() - hist.min() <= 1, name


def test_shape_ids_disjoint(small_data):
    ds = V.load_dataset(small_data)
    ids = [set(ds[name].shape_ids.tolist()) for name in V.SPLITS]
    assert not ids[0] & ids[1] and not ids[0] & ids[2] and not ids[1] & ids[2]


def test_roundtrip_bit_identical(small_data):
    ds = V.load_dataset(small_data)
    split = ds["val"]
    for i in (0, 7, 29):
        again = V.render_object(7, int(split.shape_ids[i]), int(split.labels[i]), 6, 32, 32)
        np.testing.assert_array_equal(split.views[i], again.views)
    labels = [vs.label for vs in ds]
    assert len(labels) == 102


def test_pixels_and_foreground_fraction(small_data):
    ds = V.load_dataset(small_data)
    for name in V.SPLITS:
        x = ds[name].views
        assert x.min() >= 0.0 and x.max() <= 1.0
        fg = (x > 0).reshape(x.shape[0], x.shape[1], -1).mean(axis=2)
        assert (fg > 0).all() and (fg < 0.9).all()


def test_truncated_file_is_format_error(tmp_path, small_data):
    for name in ("manifest.json", "train.mvtd", "val.mvtd", "test.mvtd"):
        (tmp_path / name).write_bytes((small_data / name).read_bytes())
    buf = (tmp_path / "val.mvtd").read_bytes()
    (tmp_path / "val.mvtd").write_bytes(buf[: len(buf) // 2])
    with pytest.raises(FormatError):
        V.load_dataset(tmp_path)


def test_flipped_byte_is_format_error(tmp_path, small_data):
    for name in ("manifest.json", "train.mvtd", "val.mvtd", "test.mvtd"):
        (tmp_path / name).write_bytes((small_data / name).read_bytes())
    buf = bytearray((tmp_path / "test.mvtd").read_bytes())
    buf[-3] ^= 0x40
    (tmp_path / "test.mvtd").write_bytes(bytes(buf))
    with pytest.raises(FormatError):
        V.load_dataset(tmp_path)


def test_unsupported_version_is_format_error(tmp_path, small_data):
    for name in ("train.mvtd", "val.mvtd", "test.mvtd"):
        (tmp_path / name).write_bytes((small_data / name).read_bytes())
    manifest = json.loads((small_data / "manifest.json").read_text())
    manifest["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(FormatError):
        V.load_dataset(tmp_path)


def test_missing_dataset_names_path(tmp_path):
    with pytest.raises(OSError, match="nowhere"):
        V.load_dataset(tmp_path / "nowhere")


def test_empty_split_rejected(tmp_path):
    with pytest.raises(ConfigError):
        V.make_dataset(tmp_path, 1, {"train": 6, "val": 0, "test": 1})


def test_view_subset_spreads_over_circuit():
    x = np.arange(12).reshape(1, 12, 1, 1, 1)
    assert V.subset_views(x, 3).ravel().tolist() == [0, 4, 8]
    assert V.subset_views(x, 12).ravel().tolist() == list(range(12))
    with pytest.raises(ConfigError):
        V.subset_views(x, 13)


def test_nearest_centroid_baseline_beats_half(small_data):
    ds = V.load_dataset(small_data)
    acc = V.nearest_centroid_accuracy(ds["train"], ds["val"])
    assert 0.5 < acc < 1.0


def test_box_blur_matches_uniform_filter():
    from scipy.ndimage import uniform_filter

    counts = np.random.default_rng(2).integers(0, 10, size=(3, 11, 7))
    ours = V.box_blur(counts) / 9
    ref = uniform_filter(counts.astype(np.float64), size=(1, 3, 3), mode="constant")
    np.testing.assert_allclose(ours, ref, atol=1e-12)
