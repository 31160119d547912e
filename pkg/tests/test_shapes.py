import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseg import shapes
from pseg.shapes import SceneConfig, Shape


def test_single_shape_config():
    cfg = SceneConfig(n_shapes=(1, 1), unlabeled_prob=0.0, seed=0)
    scene = shapes.generate(cfg, 0)
    assert scene.K == 1
    assert set(np.unique(scene.raw_labels)) == {0, 1}
    assert scene.image.shape == (3, 64, 64) and scene.image.dtype == np.float32


def test_rectangle_rasterization_exact():
    rect = Shape("rectangle", (10, 20, 30, 35), (1, 0, 0))
    mask = shapes.rasterize(rect, 64, 64)
    expected = np.zeros((64, 64), bool)
    expected[20:35, 10:30] = True
    np.testing.assert_array_equal(mask, expected)


@pytest.mark.parametrize("r", [5.0, 9.5, 17.0])
def test_circle_area_within_five_percent(r):
    mask = shapes.rasterize(Shape("circle", (32, 32, r), (0, 1, 0)), 64, 64)
    assert abs(mask.sum() / (math.pi * r * r) - 1) < 0.05


def test_triangle_orientation_does_not_matter():
    pts = ((5.0, 5.0), (40.0, 10.0), (20.0, 45.0))
    a = shapes.rasterize(Shape("triangle", pts, (0, 0, 1)), 50, 50)
    b = shapes.rasterize(Shape("triangle", pts[::-1], (0, 0, 1)), 50, 50)
    np.testing.assert_array_equal(a, b)
    assert a.sum() > 0


def test_generation_is_deterministic():
    cfg = SceneConfig(seed=7)
    a, b = shapes.generate(cfg, 3), shapes.generate(cfg, 3)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.raw_labels, b.raw_labels)
    c = shapes.generate(cfg, 4)
    assert not np.array_equal(a.image, c.image)


def test_all_kinds_occur_in_100_scenes():
    seen = set()
    for scene in shapes.dataset(SceneConfig(seed=1), 100):
        seen.update(scene.meta["kinds"])
    assert seen == set(shapes.KINDS)


def test_label_map_follows_z_order():
    back = Shape("rectangle", (10, 10, 40, 40), (0.9, 0.1, 0.1))
    front = Shape("circle", (35, 35, 10), (0.1, 0.1, 0.9))
    scene = shapes.render([back, front], (64, 64))
    m_back = shapes.rasterize(back, 64, 64)
    m_front = shapes.rasterize(front, 64, 64)
    expected = np.zeros((64, 64), np.int64)
    expected[m_back] = 1
    expected[m_front] = 2
    np.testing.assert_array_equal(scene.raw_labels, expected)
    np.testing.assert_allclose(scene.image[:, 35, 35], [0.1, 0.1, 0.9], atol=1e-6)


def test_unlabeled_shape_is_painted_but_background():
    hidden = Shape("rectangle", (5, 5, 25, 25), (0.9, 0.9, 0.1), labeled=False)
    shown = Shape("rectangle", (35, 35, 60, 60), (0.1, 0.9, 0.1))
    scene = shapes.render([hidden, shown], (64, 64))
    assert np.all(scene.raw_labels[5:25, 5:25] == 0)
    np.testing.assert_allclose(scene.image[:, 10, 10], [0.9, 0.9, 0.1], atol=1e-6)
    assert scene.K == 1 and scene.meta["unlabeled"] == [0]


def test_fully_occluded_labels_are_compacted():
    a = Shape("rectangle", (10, 10, 20, 20), (0.2, 0.2, 0.2))
    b = Shape("rectangle", (0, 0, 30, 30), (0.8, 0.8, 0.8))
    scene = shapes.render([a, b], (32, 32))
    assert scene.K == 1
    assert set(np.unique(scene.raw_labels)) == {0, 1}


def test_unsatisfiable_colors():
    cfg = SceneConfig(n_shapes=(30, 30), min_color_distance=0.6)
    with pytest.raises(shapes.UnsatisfiableConfig):
        shapes.generate(cfg, 0)


def test_dataset_indexing():
    ds = shapes.dataset(SceneConfig(seed=2), 5, offset=10)
    assert len(ds) == 5
    np.testing.assert_array_equal(ds[1].raw_labels, shapes.generate(SceneConfig(seed=2), 11).raw_labels)
    with pytest.raises(IndexError):
        ds[5]
    with pytest.raises(ValueError):
        shapes.dataset(SceneConfig(), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_generated_scene_invariants(index):
    cfg = SceneConfig(seed=0)
    scene = shapes.generate(cfg, index)
    lo, hi = cfg.n_shapes
    assert lo <= len(scene.meta["shapes"]) <= hi
    assert 0.0 <= scene.image.min() and scene.image.max() <= 1.0
    ids, counts = np.unique(scene.raw_labels[scene.raw_labels > 0], return_counts=True)
    np.testing.assert_array_equal(ids, np.arange(1, scene.K + 1))
    assert np.all(counts >= shapes.MIN_VISIBLE)
    colors = [np.array(s.color) for s in scene.meta["shapes"]] + [np.array(scene.meta["background"])]
    for i in range(len(colors)):
        for j in range(i):
            assert np.abs(colors[i] - colors[j]).max() >= cfg.min_color_distance
