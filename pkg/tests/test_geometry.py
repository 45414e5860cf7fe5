import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import angles, boxes, near_boxes, random_box
from oracles import box_rotation, corners, hull_intersection_volume, hull_iou
from rlvr3d.geometry import (
    Box9DoF,
    ConvexPolytope,
    InvalidBox,
    NonRigidTransform,
    RigidTransform,
    box_corners,
    box_polytope,
    euler_from_matrix,
    intersection_volume,
    iou3d,
    mc_iou_oracle,
    rotation_matrix,
    transform_box,
)

UNIT = Box9DoF(0, 0, 0, 1, 1, 1)


def random_rigid(rng):
    rot = rotation_matrix(*rng.uniform(-math.pi, math.pi, 3))
    return RigidTransform.from_parts(rot, rng.uniform(-3, 3, 3))


# -- boxes -------------------------------------------------------------------


@pytest.mark.parametrize("values", [
    [0, 0, 0, 0, 1, 1, 0, 0, 0],
    [0, 0, 0, 1, -1, 1, 0, 0, 0],
    [0, 0, math.nan, 1, 1, 1, 0, 0, 0],
    [0, 0, 0, 1, 1, 1, math.inf, 0, 0],
    [0, 0, 0, 1, 1, 1, 0, 0],
    [0, 0, 0, 1, 1, 1, 0, 0, 0, 0],
])
def test_invalid_boxes_rejected(values):
    with pytest.raises(InvalidBox):
        Box9DoF.from_array(values)


def test_box_rejects_non_numbers():
    with pytest.raises(InvalidBox):
        Box9DoF("1", 0, 0, 1, 1, 1)
    with pytest.raises(InvalidBox):
        Box9DoF(True, 0, 0, 1, 1, 1)


def test_box_array_round_trip():
    values = [0.5, -1, 2, 0.3, 0.4, 0.5, 0.1, -0.2, 0.3]
    box = Box9DoF.from_array(values)
    assert box.to_list() == values
    assert box.volume == pytest.approx(0.06)
    np.testing.assert_array_equal(box.center, [0.5, -1, 2])


# -- rotations ---------------------------------------------------------------


def test_zero_angles_give_identity():
    np.testing.assert_array_equal(rotation_matrix(0, 0, 0), np.eye(3))


def test_quarter_yaw_maps_x_to_y():
    np.testing.assert_allclose(rotation_matrix(math.pi / 2, 0, 0) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


@given(angles, angles, angles)
def test_rotation_matches_elementary_product(psi, theta, phi):
    rot = rotation_matrix(psi, theta, phi)
    ref = box_rotation(Box9DoF(0, 0, 0, 1, 1, 1, psi, theta, phi))
    np.testing.assert_allclose(rot, ref, atol=1e-14)
    np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-14)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-14)


@given(angles, st.floats(-1.5, 1.5), angles)
def test_euler_round_trip_away_from_gimbal_lock(psi, theta, phi):
    rot = rotation_matrix(psi, theta, phi)
    back = rotation_matrix(*euler_from_matrix(rot))
    np.testing.assert_allclose(back, rot, atol=1e-12)


@pytest.mark.parametrize("theta", [math.pi / 2, -math.pi / 2])
def test_gimbal_lock_assigns_roll_to_yaw(theta):
    rot = rotation_matrix(0.7, theta, 0.4)
    psi, th, phi = euler_from_matrix(rot)
    assert phi == 0.0
    assert th == pytest.approx(theta)
    np.testing.assert_allclose(rotation_matrix(psi, th, phi), rot, atol=1e-12)


# -- corners -----------------------------------------------------------------


def test_unit_cube_corners_in_sign_order():
    expected = np.array([[sx, sy, sz] for sx in (-0.5, 0.5) for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)])
    np.testing.assert_array_equal(box_corners(UNIT), expected)


@given(boxes())
def test_corners_match_direct_construction(box):
    np.testing.assert_allclose(box_corners(box), corners(box), atol=1e-12)


@given(boxes(), st.tuples(*(st.floats(-3, 3),) * 3))
def test_translation_shifts_corners(box, t):
    moved = Box9DoF(box.center_x + t[0], box.center_y + t[1], box.center_z + t[2],
                    *box.to_list()[3:])
    np.testing.assert_allclose(box_corners(moved), box_corners(box) + np.array(t), atol=1e-12)


# -- polytope ----------------------------------------------------------------


@given(boxes())
def test_box_polytope_volume_and_faces(box):
    poly = box_polytope(box)
    assert poly.volume() == pytest.approx(box.volume, rel=1e-12)
    # every vertex on or inside every face plane
    verts = poly.vertices
    centroid = verts.mean(axis=0)
    for face in poly.faces:
        p0, p1, p2 = verts[face[0]], verts[face[1]], verts[face[2]]
        n = np.cross(p1 - p0, p2 - p0)
        assert n @ (centroid - p0) < 0  # outward loop
        assert np.all((verts - p0) @ n <= 1e-9 * np.linalg.norm(n))


def test_clip_half_cube():
    poly = box_polytope(UNIT).clip([1.0, 0.0, 0.0], 0.0)
    assert poly.volume() == pytest.approx(0.5, abs=1e-15)
    assert poly.clip([-1.0, 0.0, 0.0], -0.1).is_empty
    assert ConvexPolytope.empty().volume() == 0.0


def test_clip_along_diagonal_gives_corner_tetrahedron():
    # x + y + z <= -1 keeps the corner tetrahedron at (-.5,-.5,-.5) with legs of 0.5
    n = np.array([1.0, 1.0, 1.0])
    poly = box_polytope(UNIT).clip(n, -1.0)
    assert poly.volume() == pytest.approx(0.5 ** 3 / 6, rel=1e-12)
    assert len(poly.points) == 4


# -- intersection and IoU ----------------------------------------------------


def test_identical_boxes():
    box = Box9DoF(0.3, -0.2, 1.0, 0.7, 1.3, 0.4, 0.5, -0.3, 1.1)
    assert intersection_volume(box, box) == pytest.approx(box.volume, rel=1e-12)
    assert iou3d(box, box) == pytest.approx(1.0, abs=1e-12)


def test_offset_unit_cubes():
    other = Box9DoF(0.5, 0, 0, 1, 1, 1)
    assert intersection_volume(UNIT, other) == pytest.approx(0.5, abs=1e-15)
    assert iou3d(UNIT, other) == pytest.approx(1 / 3, abs=1e-15)


def test_quarter_turned_cube():
    turned = Box9DoF(0, 0, 0, 1, 1, 1, math.pi / 4)
    assert intersection_volume(UNIT, turned) == pytest.approx(2 * (math.sqrt(2) - 1), abs=1e-12)
    assert iou3d(UNIT, turned) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_disjoint_and_touching_boxes():
    assert iou3d(UNIT, Box9DoF(3, 0, 0, 1, 1, 1)) == 0.0
    assert iou3d(UNIT, Box9DoF(1, 0, 0, 1, 1, 1)) == pytest.approx(0.0, abs=1e-12)


def test_nested_boxes():
    inner = Box9DoF(0.1, 0, 0, 0.2, 0.3, 0.4, 0.3, 0.2, 0.1)
    big = Box9DoF(0, 0, 0, 2, 2, 2)
    assert intersection_volume(inner, big) == pytest.approx(inner.volume, rel=1e-12)
    assert iou3d(inner, big) == pytest.approx(inner.volume / 8, rel=1e-12)


@given(near_boxes())
def test_intersection_matches_hull_oracle(pair):
    a, b = pair
    expected = hull_intersection_volume(a, b)
    assert intersection_volume(a, b) == pytest.approx(expected, rel=1e-9, abs=1e-9)


@given(near_boxes())
def test_iou_bounds_and_symmetry(pair):
    a, b = pair
    inter = intersection_volume(a, b)
    assert 0.0 <= inter <= min(a.volume, b.volume)
    assert 0.0 <= iou3d(a, b) <= 1.0
    assert iou3d(a, b) == iou3d(b, a)


@given(near_boxes(), st.floats(0.1, 10))
def test_iou_scale_consistency(pair, s):
    a, b = pair

    def scaled(box):
        return Box9DoF(*(s * v for v in box.to_list()[:6]), box.psi, box.theta, box.phi)

    assert iou3d(scaled(a), scaled(b)) == pytest.approx(iou3d(a, b), abs=1e-9)


def test_iou_matches_monte_carlo_on_overlapping_pairs(rng):
    for _ in range(20):
        a = random_box(rng, center=0.3, size=(0.5, 1.5))
        b = random_box(rng, center=0.3, size=(0.5, 1.5))
        est = mc_iou_oracle(a, b, n_samples=200_000, seed=int(rng.integers(1 << 30)))
        assert abs(iou3d(a, b) - est) < 0.01
        assert iou3d(a, b) == pytest.approx(hull_iou(a, b), abs=1e-9)


def test_monte_carlo_oracle_basic_cases():
    assert mc_iou_oracle(UNIT, UNIT, n_samples=1000) == 1.0
    assert mc_iou_oracle(UNIT, Box9DoF(5, 0, 0, 1, 1, 1), n_samples=1000) == 0.0
    a, b = UNIT, Box9DoF(0.5, 0, 0, 1, 1, 1)
    assert mc_iou_oracle(a, b, 5000, seed=3) == mc_iou_oracle(a, b, 5000, seed=3)
    with pytest.raises(ValueError):
        mc_iou_oracle(a, b, n_samples=0)


# -- transforms --------------------------------------------------------------


def test_rigid_transform_validation():
    with pytest.raises(NonRigidTransform):
        RigidTransform(np.diag([2.0, 1, 1, 1]))
    with pytest.raises(NonRigidTransform):
        RigidTransform(np.diag([-1.0, 1, 1, 1]))  # reflection
    bad_row = np.eye(4)
    bad_row[3, 0] = 1e-3
    with pytest.raises(NonRigidTransform):
        RigidTransform(bad_row)
    with pytest.raises(NonRigidTransform):
        RigidTransform(np.eye(3))
    with pytest.raises(NonRigidTransform):
        RigidTransform([math.nan] * 16)
    assert RigidTransform(list(np.eye(4).ravel())).to_list() == list(np.eye(4).ravel())


def test_transform_composition_and_inverse(rng):
    m, n = random_rigid(rng), random_rigid(rng)
    pts = rng.normal(size=(5, 3))
    np.testing.assert_allclose((m @ n).apply(pts), m.apply(n.apply(pts)), atol=1e-12)
    np.testing.assert_allclose(m.inverse().apply(m.apply(pts)), pts, atol=1e-12)


def test_identity_and_translation_transforms():
    box = Box9DoF(1, 2, 3, 1, 2, 3, 0.3, 0.2, 0.1)
    same = transform_box(box, RigidTransform.identity())
    np.testing.assert_allclose(same.to_list(), box.to_list(), atol=1e-12)
    moved = transform_box(box, RigidTransform.from_parts(np.eye(3), [1, -1, 0.5]))
    np.testing.assert_allclose(moved.center, [2, 1, 3.5], atol=1e-15)
    np.testing.assert_allclose([moved.psi, moved.theta, moved.phi], [0.3, 0.2, 0.1], atol=1e-12)


def test_quarter_turn_of_axis_aligned_box():
    box = Box9DoF(1, 0, 0, 2, 1, 0.5)
    m = RigidTransform.from_parts(rotation_matrix(math.pi / 2, 0, 0), [0, 0, 0])
    out = transform_box(box, m)
    direct = box_corners(box) @ m.rotation.T
    np.testing.assert_allclose(box_corners(out), direct, atol=1e-12)


def test_transform_box_accepts_raw_matrix():
    box = Box9DoF(0, 0, 0, 1, 1, 1)
    out = transform_box(box, np.eye(4))
    assert out.to_list() == pytest.approx(box.to_list())
    with pytest.raises(NonRigidTransform):
        transform_box(box, np.diag([1.0, 1, 2, 1]))


@given(boxes(), angles, angles, angles, st.tuples(*(st.floats(-5, 5),) * 3))
def test_transformed_corners_equal_transformed_box(box, psi, theta, phi, t):
    m = RigidTransform.from_parts(rotation_matrix(psi, theta, phi), t)
    np.testing.assert_allclose(box_corners(transform_box(box, m)), m.apply(box_corners(box)), atol=1e-9)


@given(near_boxes(), angles, angles, angles, st.tuples(*(st.floats(-5, 5),) * 3))
def test_iou_invariant_under_rigid_motion(pair, psi, theta, phi, t):
    a, b = pair
    m = RigidTransform.from_parts(rotation_matrix(psi, theta, phi), t)
    assert iou3d(transform_box(a, m), transform_box(b, m)) == pytest.approx(iou3d(a, b), abs=1e-9)
