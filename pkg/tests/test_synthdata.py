import json

import numpy as np
import pytest

from detptq.synthdata import (
    ANNOTATION_FILE,
    CLASS_NAMES,
    CalibrationSet,
    DatasetError,
    SceneSpec,
    _shape_mask,
    generate_dataset,
    load_calibration,
    load_dataset,
    read_ppm,
    save_dataset,
    write_ppm,
)


def test_same_seed_same_pixels():
    a = generate_dataset(SceneSpec(), 5, seed=4)
    b = generate_dataset(SceneSpec(), 5, seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    assert all(np.array_equal(x.boxes, y.boxes) for x, y in zip(a.annotations, b.annotations))
    c = generate_dataset(SceneSpec(), 5, seed=5)
    assert not np.array_equal(a.images, c.images)


def test_image_depends_only_on_seed_and_index():
    short = generate_dataset(SceneSpec(), 3, seed=9)
    long = generate_dataset(SceneSpec(), 6, seed=9)
    np.testing.assert_array_equal(short.images, long.images[:3])


def test_circle_mask_fills_its_box():
    m = _shape_mask("circle", 22, 22, 20, 64)
    ys, xs = np.nonzero(m)
    assert (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1) == (22, 22, 42, 42)
    with pytest.raises(ValueError):
        _shape_mask("hexagon", 0, 0, 5, 64)


def test_boxes_and_counts_within_spec():
    spec = SceneSpec()
    ds = generate_dataset(spec, 200, seed=0)
    assert ds.images.dtype == np.uint8 and ds.images.shape[1:] == (64, 64, 3)
    for gt in ds.annotations:
        assert spec.shapes_per_image[0] <= len(gt.boxes) <= spec.shapes_per_image[1]
        assert np.all(gt.boxes[:, :2] >= 0) and np.all(gt.boxes[:, 2:] <= spec.canvas)
        sizes = gt.boxes[:, 2] - gt.boxes[:, 0]
        assert np.all(sizes >= spec.size_range[0]) and np.all(sizes <= spec.size_range[1])


def test_classes_are_balanced():
    ds = generate_dataset(SceneSpec(), 1000, seed=0)
    labels = np.concatenate([gt.labels for gt in ds.annotations])
    freq = np.bincount(labels, minlength=len(CLASS_NAMES)) / len(labels)
    assert np.all(np.abs(freq - 1 / 3) <= 0.1 / 3)


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(shapes_per_image=(0, 2))
    with pytest.raises(ValueError):
        SceneSpec(size_range=(10, 80))


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 5, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
    (tmp_path / "b.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(DatasetError):
        read_ppm(tmp_path / "b.ppm")


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(SceneSpec(), 6, seed=1)
    save_dataset(ds, tmp_path, seed=1)
    back = load_dataset(tmp_path)
    np.testing.assert_array_equal(back.images, ds.images)
    for a, b in zip(ds.annotations, back.annotations):
        np.testing.assert_array_equal(a.boxes, b.boxes)
        np.testing.assert_array_equal(a.labels, b.labels)
    first = json.loads((tmp_path / ANNOTATION_FILE).read_text().splitlines()[0])
    assert set(first["boxes"][0]) == {"x1", "y1", "x2", "y2", "class_id"}
    assert back.spec == ds.spec


def test_calibration_needs_no_annotations(tmp_path):
    ds = generate_dataset(SceneSpec(), 8, seed=1)
    save_dataset(ds, tmp_path)
    (tmp_path / ANNOTATION_FILE).unlink()
    cal = load_calibration(tmp_path, 4, seed=0)
    assert isinstance(cal, CalibrationSet) and len(cal) == 4
    np.testing.assert_array_equal(cal.images, ds.calibration(4, seed=0).images)
    assert not hasattr(cal, "annotations")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
