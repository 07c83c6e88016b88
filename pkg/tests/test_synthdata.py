import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from boxadapt import synthdata as sd


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    m = sd.generate_dataset(root, patients=3, slices=7, eval_patients=2, seed=5)
    return root, m


# ---------------------------------------------------------------------------
# rasters


def test_raster_float_file_size_and_round_trip(tmp_path):
    g = np.arange(6, dtype=np.float32).reshape(2, 3) / 7
    p = tmp_path / "a.bar"
    sd.raster_write(g, p)
    assert p.stat().st_size == 4 + 4 + 4 + 1 + 24 == 37
    back = sd.raster_read(p)
    np.testing.assert_array_equal(back, g)
    q = tmp_path / "b.bar"
    sd.raster_write(back, q)
    assert p.read_bytes() == q.read_bytes()


def test_raster_u8_lossless(tmp_path):
    m = np.array([[0, 1, 1], [1, 0, 0]], dtype=np.uint8)
    p = tmp_path / "m.bar"
    sd.raster_write(m, p)
    back = sd.raster_read(p)
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, m)


def test_raster_errors_are_distinct(tmp_path):
    p = tmp_path / "g.bar"
    sd.raster_write(np.zeros((2, 2), np.float32), p)
    data = p.read_bytes()
    cases = {sd.RasterFormatError: b"BAR2" + data[4:],
             sd.RasterTruncatedError: data[:-1],
             sd.RasterDtypeError: data[:12] + b"\x07" + data[13:]}
    for err, blob in cases.items():
        bad = tmp_path / f"{err.__name__}.bar"
        bad.write_bytes(blob)
        with pytest.raises(err):
            sd.raster_read(bad)
    with pytest.raises(sd.RasterError):
        sd.raster_write(np.zeros((2, 2, 2)), tmp_path / "x.bar")


# ---------------------------------------------------------------------------
# manifest


def test_manifest_round_trip_preserves_unknown_keys_and_order(tmp_path):
    recs = [{"id": "b", "role": "eval", "extra": [1, 2]}, {"id": "a", "role": "eval"}]
    p = tmp_path / "m.jsonl"
    sd.write_manifest(sd.Manifest(recs, tmp_path), p)
    back = sd.read_manifest(p)
    assert back.records == recs
    sd.write_manifest(back, tmp_path / "n.jsonl")
    assert p.read_bytes() == (tmp_path / "n.jsonl").read_bytes()


def test_manifest_rejects_duplicates_malformed_and_missing(tmp_path):
    with pytest.raises(sd.ManifestError):
        sd.Manifest([{"id": "a", "role": "eval"}, {"id": "a", "role": "eval"}])
    p = tmp_path / "m.jsonl"
    p.write_text('{"id": "a", "role": "eval"}\n{not json\n')
    with pytest.raises(sd.ManifestError, match=":2:"):
        sd.read_manifest(p)
    p.write_text('{"id": "a", "role": "eval", "image_path": "images/nope.bar"}\n')
    with pytest.raises(sd.ManifestError, match="nope.bar"):
        sd.read_manifest(p)


# ---------------------------------------------------------------------------
# generation


def test_generation_is_byte_deterministic(tmp_path):
    a = sd.generate_dataset(tmp_path / "a", patients=2, slices=3, eval_patients=1, seed=9)
    sd.generate_dataset(tmp_path / "b", patients=2, slices=3, eval_patients=1, seed=9)
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    for r in a:
        for key in ("image_path", "mask_path"):
            assert (tmp_path / "a" / r[key]).read_bytes() == (tmp_path / "b" / r[key]).read_bytes()


def test_generation_roles_and_split_hygiene(small_set):
    _, m = small_set
    assert len(m) == (3 + 3 + 2) * 7
    train = {r["patient"] for r in m if r["role"].startswith("target")}
    ev = {r["patient"] for r in m if r["role"] == "eval"}
    assert train and ev and not train & ev
    assert all(r["domain"] == "source" for r in m.by_role("source-labeled"))
    assert not m.by_role("target-weak")


def test_images_in_unit_interval_and_masks_binary(small_set):
    root, m = small_set
    for r in m:
        img = sd.raster_read(root / r["image_path"])
        mask = sd.raster_read(root / r["mask_path"])
        assert img.shape == (64, 64) and 0 <= img.min() and img.max() <= 1
        assert set(np.unique(mask)) <= {0, 1}


def test_foreground_fraction_within_radius_bounds(small_set):
    """Pixel-count oracle: one ellipse at the smallest scale up to two at the largest."""
    root, m = small_set
    for r in m:
        spec = sd.SOURCE_DOMAIN if r["domain"] == "source" else sd.TARGET_DOMAIN
        rmin, rmax = spec.radius_range
        lo = math.pi * (rmin * sd.MIN_SCALE * 0.97) ** 2 / (64 * 64)
        hi = 2 * math.pi * (rmax * sd.MAX_SCALE) ** 2 / (64 * 64)
        frac = sd.raster_read(root / r["mask_path"]).mean()
        # rasterization loses at most a one-pixel ring
        ring = 2 * math.pi * rmin * sd.MIN_SCALE / (64 * 64)
        assert lo - ring <= frac <= hi + 1e-9


def test_domain_mean_intensity_gap(tmp_path):
    m = sd.generate_dataset(tmp_path, patients=6, slices=7, eval_patients=0, seed=0)
    means = {"source": [], "target": []}
    for r in m:
        means[r["domain"]].append(sd.raster_read(tmp_path / r["image_path"]).mean())
    gap = sd.TARGET_DOMAIN.bg_mean - sd.SOURCE_DOMAIN.bg_mean
    assert abs(np.mean(means["target"]) - np.mean(means["source"])) >= abs(gap)


def test_degenerate_spec_rejected(tmp_path):
    with pytest.raises(sd.DataConfigError):
        sd.generate_dataset(tmp_path, sd.DomainSpec("bad", radius_range=(0.0, 3.0)))
    with pytest.raises(sd.DataConfigError):
        sd.generate_dataset(tmp_path, sd.DomainSpec("big", radius_range=(30.0, 40.0)))
    with pytest.raises(sd.DataConfigError):
        sd.generate_dataset(tmp_path, patients=0)


def test_slice_scale_profile():
    assert sd.slice_scale(3, 7) == 1.0
    assert sd.slice_scale(0, 7) == pytest.approx(sd.MIN_SCALE)
    assert sd.slice_scale(0, 1) == 1.0


# ---------------------------------------------------------------------------
# boxes and annotation selection


def test_derive_box_definitions():
    m = np.zeros((10, 10), np.uint8)
    m[3:6, 2:8] = 1
    assert sd.derive_box(m, 0, 0).rects == ((3, 2, 6, 8),)
    one = np.zeros((10, 10), np.uint8)
    one[4, 6] = 1
    assert sd.derive_box(one, 1, 0).rects == ((3, 5, 6, 8),)
    corner = np.zeros((10, 10), np.uint8)
    corner[0, 0] = 1
    assert sd.derive_box(corner, 1, 0).rects == ((0, 0, 2, 2),)
    with pytest.raises(ValueError):
        sd.derive_box(np.zeros((4, 4)), 1, 2)


@settings(max_examples=80, deadline=None)
@given(hnp.arrays(np.uint8, (12, 12), elements=st.integers(0, 1)),
       st.integers(0, 3), st.integers(0, 4), st.integers(0, 2**32 - 1))
def test_box_always_covers_foreground(mask, margin, jitter, seed):
    if not mask.any():
        return
    w = sd.derive_box(mask, margin, jitter, seed).w
    assert not (mask.astype(bool) & (w == 0)).any()


def test_center_slices_index_arithmetic():
    assert sd.center_slices(7, 3) == [2, 3, 4]
    assert sd.center_slices(7, 0) == []
    assert sd.center_slices(7, 7) == list(range(7))
    assert sd.center_slices(6, 1) == [2]
    with pytest.raises(ValueError):
        sd.center_slices(7, 8)


def test_select_annotated_endpoints_and_boxes(small_set):
    root, m = small_set
    three = sd.select_annotated(m, 3)
    weak = three.by_role("target-weak")
    assert len(weak) == 3 * 3 and {r["slice"] for r in weak} == {2, 3, 4}
    for r in weak:
        w = sd.BoxMask((tuple(r["box"]),), 64, 64).w
        mask = sd.raster_read(root / r["mask_path"])
        assert not (mask.astype(bool) & (w == 0)).any()
    assert not sd.select_annotated(m, 0).by_role("target-weak")
    assert not sd.select_annotated(m, 7).by_role("target-unlabeled")
    with pytest.raises(ValueError):
        sd.select_annotated(m, 8)
    # re-selection from an already annotated manifest is idempotent
    assert sd.select_annotated(three, 3).records == three.records


def test_load_split_shapes(small_set):
    _, m = small_set
    m3 = sd.select_annotated(m, 3)
    weak = sd.load_split(m3, "target-weak")
    assert weak.images.shape == (9, 1, 64, 64) and weak.boxes.shape == (9, 64, 64)
    assert weak.masks is None
    ev = sd.load_split(m3, "eval")
    assert ev.masks.shape == (14, 64, 64)
    empty = sd.load_split(sd.select_annotated(m, 0), "target-weak")
    assert len(empty) == 0


def test_manifest_lines_are_json(small_set):
    root, _ = small_set
    for line in (root / "manifest.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert {"id", "patient", "slice", "domain", "role", "image_path"} <= set(rec)
