import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mammoclu.data_io import ValidationError
from mammoclu.points import PointSet, embed_batch, image_to_points, points_to_grid


def test_single_pixel():
    ps = image_to_points(np.array([[[0.2, 0.4, 0.6]]]))
    np.testing.assert_array_equal(ps.points, [[0.2, 0.4, 0.6, 0.0, 0.0]])


def test_two_pixels_positions():
    ps = image_to_points(np.zeros((1, 2, 3)))
    np.testing.assert_array_equal(ps.points[:, 3], [-0.25, 0.25])
    np.testing.assert_array_equal(ps.points[:, 4], [0.0, 0.0])


def test_gray_replication():
    gray = np.random.default_rng(1).uniform(size=(3, 4, 1))
    ps = image_to_points(np.repeat(gray, 3, axis=2))
    assert np.all(ps.points[:, 0] == ps.points[:, 1]) and np.all(ps.points[:, 1] == ps.points[:, 2])


def test_row_major_order():
    img = np.zeros((2, 3, 3))
    img[1, 2] = 1.0
    ps = image_to_points(img)
    assert ps.points[5, 0] == 1.0
    assert ps.points[5, 3] == pytest.approx(2.5 / 3 - 0.5)
    assert ps.points[5, 4] == pytest.approx(0.25)


def test_non_finite_rejected():
    img = np.zeros((2, 2, 3))
    img[0, 0, 1] = np.nan
    with pytest.raises(ValidationError):
        image_to_points(img)


def test_round_trip_4x4():
    img = np.random.default_rng(0).uniform(size=(4, 4, 3))
    grid = points_to_grid(image_to_points(img))
    np.testing.assert_array_equal(grid[..., :3], img)


def test_grid_mismatch():
    with pytest.raises(ValidationError):
        PointSet(np.zeros((3, 5)), (2, 2))


def test_single_point_grid():
    pt = np.arange(5.0).reshape(1, 5)
    grid = points_to_grid(PointSet(pt, (1, 1)), 5)
    assert grid.shape == (1, 1, 5)
    np.testing.assert_array_equal(grid[0, 0], pt[0])


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 2**16))
def test_position_properties(h, w, seed):
    rng = np.random.default_rng(seed)
    a = image_to_points(rng.uniform(size=(h, w, 3)))
    b = image_to_points(rng.uniform(size=(h, w, 3)))
    np.testing.assert_array_equal(a.position, b.position)
    assert np.all(np.abs(a.position) < 0.5)
    assert np.all(np.abs(a.position.mean(axis=0)) < 1e-12)
    assert np.all((a.color >= 0) & (a.color <= 1))
    np.testing.assert_array_equal(points_to_grid(a)[..., :3].reshape(-1, 3), a.color)


def test_embed_batch_matches_single():
    img = np.random.default_rng(2).uniform(size=(2, 3, 4, 3))
    batch = embed_batch(torch.as_tensor(img))
    for i in range(2):
        np.testing.assert_array_equal(batch[i].numpy().reshape(-1, 5), image_to_points(img[i]).points)
