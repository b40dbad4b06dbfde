import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from partlayout.errors import EmptyInputError
from partlayout.obb import EPS_THIN, Obb, enclosing_obb, min_obb, obb_corners, pca_obb
from conftest import random_rotation
from oracles import brute_force_box_volume

seeds = st.integers(0, 2**32 - 1)


def box_points(ext, rot=None, center=(0, 0, 0)):
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    pts = signs * np.asarray(ext) / 2
    if rot is not None:
        pts = pts @ rot.T
    return pts + center


def test_obb_invariants_enforced():
    with pytest.raises(ValueError):
        Obb([0, 0, 0], [1, 0, 1], [0, 0, 0, 1])
    b = Obb([0, 0, 0], [1, 2, 3], [0, 0, 0, 2])
    assert np.linalg.norm(b.rotation) == pytest.approx(1, abs=1e-12)
    assert b.volume() == pytest.approx(48)


def test_axis_aligned_box_corners():
    b = min_obb(box_points([1, 2, 3]))
    assert b.volume() == pytest.approx(6, abs=1e-9)
    # canonical order: half extents descending, axes up to sign
    assert np.allclose(b.half_extents, [1.5, 1.0, 0.5])
    assert np.allclose(np.abs(b.matrix), [[0, 0, 1], [0, 1, 0], [1, 0, 0]], atol=1e-9)


def test_rotated_box_corners():
    r = random_rotation(np.random.default_rng(5))
    assert min_obb(box_points([1, 2, 3], r)).volume() == pytest.approx(6, abs=1e-9)


def test_min_obb_vs_rotation_grid_ball():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(64, 3))
    pts *= (rng.random(64) ** (1 / 3) / np.linalg.norm(pts, axis=1))[:, None]
    vol = min_obb(pts).volume()
    assert vol <= brute_force_box_volume(pts) * (1 + 1e-9)


def test_min_obb_errors_and_degenerate():
    with pytest.raises(EmptyInputError):
        min_obb(np.zeros((0, 3)))
    flat = np.random.default_rng(0).random((20, 3))
    flat[:, 2] = 0.3
    b = min_obb(flat)
    assert b.degenerate and b.half_extents.min() == pytest.approx(EPS_THIN)
    assert np.all(b.contains(flat))
    line = np.outer(np.linspace(0, 1, 5), [1, 2, 3])
    b = min_obb(line)
    assert b.degenerate and np.sum(b.half_extents == EPS_THIN) == 2
    p = min_obb(np.array([[1.0, 2, 3]]))
    assert p.degenerate and np.allclose(p.center, [1, 2, 3])


def test_pca_examples():
    b = pca_obb(box_points([1, 2, 3]))
    assert b.volume() == pytest.approx(6, abs=1e-9)
    rng = np.random.default_rng(2)
    cloud = rng.normal(size=(1000, 3)) * [3, 1, 0.3]
    axis = pca_obb(cloud).matrix[:, 0]
    # oracle: leading eigenvector of the sample covariance, here close to x
    assert np.degrees(np.arccos(min(1.0, abs(axis[0])))) < 5


@settings(max_examples=25)
@given(seeds)
def test_pca_never_smaller_than_min(seed):
    pts = np.random.default_rng(seed).normal(size=(30, 3)) * [2, 1, 0.5]
    assert pca_obb(pts).volume() >= min_obb(pts).volume() - 1e-9


def test_enclosing_examples():
    one = Obb([0.1, 0.2, 0.3], [0.5, 0.4, 0.3], [0.1, 0.2, 0.3, 0.9])
    assert enclosing_obb([one]).volume() == pytest.approx(one.volume(), abs=1e-9)
    two = [Obb.axis_aligned([-1, 0, 0], [0.5] * 3), Obb.axis_aligned([1, 0, 0], [0.5] * 3)]
    e = enclosing_obb(two)
    assert e.volume() == pytest.approx(3, abs=1e-9)
    assert np.allclose(np.sort(e.half_extents * 2), [1, 1, 3])
    with pytest.raises(EmptyInputError):
        enclosing_obb([])


def test_enclosing_random_boxes():
    rng = np.random.default_rng(4)
    boxes = [Obb(rng.normal(size=3), rng.uniform(0.1, 0.5, 3), rng.normal(size=4)) for _ in range(5)]
    corners = np.concatenate([obb_corners(b) for b in boxes])
    e = enclosing_obb(boxes)
    assert np.all(e.contains(corners))
    assert e.volume() <= brute_force_box_volume(corners) * (1 + 1e-9)


def test_corner_order():
    c = obb_corners(Obb.axis_aligned([0, 0, 0], [0.5] * 3))
    expected = [[(1 if i >> k & 1 else -1) * 0.5 for k in range(3)] for i in range(8)]
    assert np.allclose(c, expected)
    assert np.allclose(obb_corners(Obb.axis_aligned([1, 0, 0], [0.5] * 3)), np.array(expected) + [1, 0, 0])


@given(seeds)
def test_corner_round_trip(seed):
    rng = np.random.default_rng(seed)
    b = Obb(rng.normal(size=3), rng.uniform(0.1, 2, 3), rng.normal(size=4))
    local = (obb_corners(b) - b.center) @ b.matrix
    assert np.allclose(np.abs(local), b.half_extents, atol=1e-12)


@settings(max_examples=50)
@given(seeds, st.integers(4, 40))
def test_containment(seed, n):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    b = min_obb(pts)
    assert np.all(np.abs(b.to_local(pts)) <= b.half_extents + 1e-9)


@settings(max_examples=50)
@given(seeds, st.integers(4, 40))
def test_rotation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    r = random_rotation(rng)
    a, b = min_obb(pts).volume(), min_obb(pts @ r.T).volume()
    assert abs(a - b) <= 1e-9 * a


@settings(max_examples=25)
@given(seeds, st.integers(4, 30))
def test_monotone_in_points(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    extra = np.vstack([pts, rng.normal(size=(1, 3)) * 1.5])
    assert min_obb(extra).volume() >= min_obb(pts).volume() * (1 - 1e-9)


@settings(max_examples=100)
@given(seeds)
def test_min_of_box_corners_is_box(seed):
    rng = np.random.default_rng(seed)
    b = Obb(rng.normal(size=3), rng.uniform(0.05, 2, 3), rng.normal(size=4))
    assert min_obb(obb_corners(b)).volume() == pytest.approx(b.volume(), rel=1e-9)
