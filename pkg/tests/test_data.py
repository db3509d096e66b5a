import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from PIL import Image

from multinet_vit.data import (
    CLASS_NAMES,
    MAGNIFICATIONS,
    CLASS_COUNTS,
    SampleDescriptor,
    SyntheticSpec,
    bilinear_resize,
    filter_magnification,
    generate_synthetic,
    load_and_preprocess,
    load_arrays,
    normalize_class,
    scan_dataset,
    split,
    split_sizes,
)
from multinet_vit.errors import DataError


def full_descriptors():
    return [SampleDescriptor(f"{c}/{m}/{i}.png", c, m)
            for c, counts in CLASS_COUNTS.items() for m, n in zip(MAGNIFICATIONS, counts) for i in range(n)]


def test_scan_full_tree(full_root):
    scan = scan_dataset(full_root)
    assert len(scan) == 7909
    counts = scan.counts()
    assert sum(counts["A"].values()) == 444
    assert sum(c["40X"] for c in counts.values()) == 1995
    assert len(filter_magnification(scan.samples, "400X")) == 1820
    for cls, row in CLASS_COUNTS.items():
        assert tuple(counts[cls][m] for m in MAGNIFICATIONS) == row


def test_empty_root_warns(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        scan = scan_dataset(tmp_path)
    assert len(scan) == 0
    assert "no images" in caplog.text


def test_missing_root_and_unknown_class(tmp_path):
    with pytest.raises(DataError):
        scan_dataset(tmp_path / "absent")
    (tmp_path / "benign" / "cartilage" / "40X").mkdir(parents=True)
    with pytest.raises(DataError, match="cartilage"):
        scan_dataset(tmp_path)


def test_class_name_normalisation():
    assert normalize_class("ductal_carcinoma") == "DC"
    assert normalize_class("Phyllodes Tumor") == "PT"
    assert normalize_class("ta") == "TA"


def test_manifest_layout_and_skip_report(tmp_path):
    img = tmp_path / "x.png"
    Image.new("RGB", (4, 4), (255, 0, 0)).save(img)
    (tmp_path / "manifest.csv").write_text(
        "path,class_name,magnification\nx.png,adenosis,40\nmissing.png,DC,100X\n")
    scan = scan_dataset(tmp_path, layout="manifest")
    assert [s.class_name for s in scan] == ["A"]
    assert scan.samples[0].magnification == "40X"
    assert len(scan.skipped) == 1 and "missing.png" in scan.skipped[0][0]


def test_split_all_train():
    parts = split(full_descriptors()[:500], (1, 0, 0), seed=0)
    assert len(parts.train) == 500 and not parts.val and not parts.test


def test_split_is_stratified_disjoint_and_deterministic():
    samples = full_descriptors()
    a = split(samples, (0.7, 0.15, 0.15), seed=11)
    b = split(list(reversed(samples)), (0.7, 0.15, 0.15), seed=11)
    assert a.to_json() == b.to_json()
    paths = [s.path for s in a.train + a.val + a.test]
    assert len(paths) == len(set(paths)) == len(samples)
    for cls, counts in CLASS_COUNTS.items():
        n = sum(counts)
        for part, ratio in ((a.train, 0.7), (a.val, 0.15), (a.test, 0.15)):
            got = sum(1 for s in part if s.class_name == cls)
            assert abs(got - ratio * n) <= 1, (cls, got, ratio * n)
    c = split(samples, (0.7, 0.15, 0.15), seed=12)
    assert c.to_json() != a.to_json()


def test_split_spreads_magnifications():
    parts = split(full_descriptors(), (0.7, 0.15, 0.15), seed=0)
    for cls, counts in CLASS_COUNTS.items():
        for m, n in zip(MAGNIFICATIONS, counts):
            got = sum(1 for s in parts.train if s.class_name == cls and s.magnification == m)
            assert abs(got - 0.7 * n) <= 2


def test_split_sizes_largest_remainder():
    for n in range(3, 60):
        sizes = split_sizes(n, (0.7, 0.15, 0.15))
        assert sum(sizes) == n
        assert all(abs(s - r * n) < 1 for s, r in zip(sizes, (0.7, 0.15, 0.15)))


def test_split_errors():
    samples = full_descriptors()[:10]
    with pytest.raises(ValueError):
        split(samples, (0.5, 0.2, 0.2))
    tiny = [SampleDescriptor("a.png", "A", "40X"), SampleDescriptor("b.png", "A", "40X")]
    with pytest.raises(ValueError, match="fewer"):
        split(tiny, (0.6, 0.2, 0.2))


def test_bilinear_corners_of_checkerboard():
    board = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    out = bilinear_resize(board, 4, 4)[0]
    assert out.shape == (4, 4)
    assert (out[0, 0], out[0, 3], out[3, 0], out[3, 3]) == (0.0, 1.0, 1.0, 0.0)
    # interior pixel at source coordinate (0.25, 0.25)
    assert_allclose(out[1, 1], 0.25 * 0.75 * 2)


def test_white_png_is_all_ones(tmp_path):
    Image.new("RGB", (10, 6), (255, 255, 255)).save(tmp_path / "w.png")
    sample = load_and_preprocess(SampleDescriptor("w.png", "F", "40X"), 8, tmp_path)
    assert sample.image.shape == (3, 8, 8)
    assert_array_equal(sample.image, 1.0)


def test_channel_order_is_rgb(tmp_path):
    Image.new("RGB", (2, 2), (255, 0, 0)).save(tmp_path / "r.png")
    img = load_and_preprocess(SampleDescriptor("r.png", "F", "40X"), 2, tmp_path).image
    assert_array_equal(img[:, 0, 0], [1.0, 0.0, 0.0])


def test_non_image_raises_with_path(tmp_path):
    (tmp_path / "fake.png").write_text("hello")
    with pytest.raises(DataError, match="fake.png"):
        load_and_preprocess(SampleDescriptor("fake.png", "F", "40X"), 8, tmp_path)


def test_load_arrays_keeps_order(synth_root, monkeypatch):
    monkeypatch.setenv("MULTINET_THREADS", "3")
    samples = scan_dataset(synth_root).samples[::-1]
    x, y = load_arrays(samples, 8, synth_root)
    assert x.shape == (64, 3, 8, 8) and x.dtype == np.float32
    assert 0.0 <= x.min() and x.max() <= 1.0
    assert_array_equal(y, [s.label for s in samples])


def test_synthetic_counts(synth_root):
    scan = scan_dataset(synth_root)
    assert len(scan) == 64
    assert {s.class_name for s in scan} == set(CLASS_NAMES)
    assert all(sum(scan.counts()[c].values()) == 8 for c in CLASS_NAMES)


def test_synthetic_zero_noise_images_identical(tmp_path):
    scan = generate_synthetic(SyntheticSpec(images_per_class=3, resolution=8, noise=0.0), tmp_path)
    x, y = load_arrays(scan.samples, 8, tmp_path)
    for k in range(8):
        group = x[y == k]
        assert all(np.array_equal(g, group[0]) for g in group)


def test_synthetic_seed_determinism(tmp_path):
    a = generate_synthetic(SyntheticSpec(images_per_class=2, resolution=8, seed=4), tmp_path / "a")
    generate_synthetic(SyntheticSpec(images_per_class=2, resolution=8, seed=4), tmp_path / "b")
    for s in a.samples:
        assert (tmp_path / "a" / s.path).read_bytes() == (tmp_path / "b" / s.path).read_bytes()


def test_linear_probe_separates_classes(synth_root):
    x, y = load_arrays(scan_dataset(synth_root).samples, 16, synth_root)
    features = np.hstack([x.reshape(len(x), -1), np.ones((len(x), 1))])
    targets = np.eye(8)[y]
    # fit on even-indexed images, score on both halves
    fit = np.arange(len(x)) % 2 == 0
    w, *_ = np.linalg.lstsq(features[fit], targets[fit], rcond=None)
    pred = (features @ w).argmax(axis=1)
    assert np.mean(pred[fit] == y[fit]) > 0.9
    assert np.mean(pred[~fit] == y[~fit]) > 0.9


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(images_per_class=0)
    with pytest.raises(ValueError):
        SyntheticSpec(noise=-1)
