from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import angle_between_rotations

from scenerefine.geometry import RigidTransform, axis_rotation, random_rotation, rotation_angle
from scenerefine.symmetry import (
    VARIANTS,
    SymmetryClass,
    closest_symmetric_pose,
    enumerate_symmetries,
    symmetric_residual_angle,
)

seeds = st.integers(0, 2**32 - 1)
EXPECTED_SIZES = {"none": 1, "front_back": 2, "box": 4, "cuboid": 8, "rotational": 72, "cylindrical": 144}


@pytest.mark.parametrize("variant", VARIANTS)
def test_group_sizes_and_identity_first(variant):
    syms = enumerate_symmetries(SymmetryClass(variant))
    assert len(syms) == EXPECTED_SIZES[variant]
    np.testing.assert_array_equal(syms[0], np.eye(3))
    for s in syms:
        np.testing.assert_allclose(s.T @ s, np.eye(3), atol=1e-12)
        assert np.linalg.det(s) == pytest.approx(1.0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_group_closure(variant):
    syms = enumerate_symmetries(SymmetryClass(variant))
    for a in syms:
        for b in syms[:: max(1, len(syms) // 12)]:
            prod = a @ b
            assert np.min(np.abs(syms - prod).max(axis=(1, 2))) < 1e-9


def test_box_group_elements():
    syms = enumerate_symmetries(SymmetryClass("box"))
    expected = [np.eye(3), axis_rotation("z", np.pi), axis_rotation("x", np.pi), axis_rotation("y", np.pi)]
    for e in expected:
        assert np.min(np.abs(syms - e).max(axis=(1, 2))) < 1e-12


def test_rotational_resolution():
    syms = enumerate_symmetries(SymmetryClass("rotational", 5.0))
    assert len(syms) == 72
    for s in syms:
        np.testing.assert_allclose(s[:, 2], [0, 0, 1], atol=1e-12)


def test_invalid_classes():
    with pytest.raises(ValueError):
        SymmetryClass("spherical")
    with pytest.raises(ValueError):
        SymmetryClass("rotational", 7.0)
    with pytest.raises(ValueError):
        SymmetryClass("cylindrical", 0.0)


def test_dict_round_trip():
    c = SymmetryClass("cylindrical", 10.0)
    assert SymmetryClass.from_dict(c.to_dict()) == c
    assert SymmetryClass.from_dict({"symmetry": "box"}) == SymmetryClass("box")


def test_trivial_set_keeps_gt(rng):
    gt = RigidTransform(random_rotation(rng), rng.normal(size=3))
    est = RigidTransform(random_rotation(rng), rng.normal(size=3))
    idx, pose = closest_symmetric_pose(gt, est, enumerate_symmetries(SymmetryClass("none")))
    assert idx == 0 and pose == gt


def test_rotational_93_degrees():
    syms = enumerate_symmetries(SymmetryClass("rotational", 5.0))
    gt = RigidTransform.identity()
    est = RigidTransform(axis_rotation("z", np.deg2rad(93)), np.zeros(3))
    idx, pose = closest_symmetric_pose(gt, est, syms)
    # exhaustive scan oracle
    angles = [angle_between_rotations(s, est.rotation) for s in syms]
    assert idx == int(np.argmin(angles))
    assert np.rad2deg(rotation_angle(pose.rotation @ est.rotation.T)) <= 2.5 + 1e-9


def test_front_back_picks_flip(rng):
    syms = enumerate_symmetries(SymmetryClass("front_back"))
    gt = RigidTransform(random_rotation(rng), np.zeros(3))
    flipped = gt.rotation @ axis_rotation("z", np.pi)
    est = RigidTransform(axis_rotation("x", 0.1) @ flipped, np.zeros(3))
    idx, pose = closest_symmetric_pose(gt, est, syms)
    assert idx == 1
    assert angle_between_rotations(pose.rotation, est.rotation) < angle_between_rotations(gt.rotation, est.rotation)


def test_translation_kept(rng):
    gt = RigidTransform(random_rotation(rng), np.array([1.0, 2, 3]))
    est = RigidTransform(random_rotation(rng), np.zeros(3))
    _, pose = closest_symmetric_pose(gt, est, enumerate_symmetries(SymmetryClass("cuboid")))
    np.testing.assert_array_equal(pose.translation, gt.translation)


def test_ties_go_to_lowest_index():
    syms = enumerate_symmetries(SymmetryClass("front_back"))
    gt = RigidTransform.identity()
    # estimate at +90 deg about z is equidistant from I and Rz(pi)
    est = RigidTransform(axis_rotation("z", np.pi / 2), np.zeros(3))
    assert closest_symmetric_pose(gt, est, syms)[0] == 0


@pytest.mark.parametrize("variant", VARIANTS)
@given(seed=seeds)
def test_argmax_trace_equals_argmin_angle(variant, seed):
    rng = np.random.default_rng(seed)
    syms = enumerate_symmetries(SymmetryClass(variant))
    gt = RigidTransform(random_rotation(rng), np.zeros(3))
    est = RigidTransform(random_rotation(rng), np.zeros(3))
    idx, pose = closest_symmetric_pose(gt, est, syms)
    angles = np.array([angle_between_rotations(gt.rotation @ s, est.rotation) for s in syms])
    assert angles[idx] <= angles.min() + 1e-9


@pytest.mark.parametrize("variant", ["rotational", "cylindrical"])
@given(seed=seeds, theta=st.floats(-np.pi, np.pi))
def test_continuous_residual_about_axis_within_half_resolution(variant, seed, theta):
    rng = np.random.default_rng(seed)
    syms = enumerate_symmetries(SymmetryClass(variant, 5.0))
    gt = RigidTransform(random_rotation(rng), np.zeros(3))
    est = RigidTransform(gt.rotation @ axis_rotation("z", theta), np.zeros(3))
    assert np.rad2deg(symmetric_residual_angle(gt, est, syms)) <= 2.5 + 1e-9


@pytest.mark.parametrize("variant", VARIANTS)
@given(seed=seeds)
def test_selection_invariant_to_common_left_rotation(variant, seed):
    rng = np.random.default_rng(seed)
    syms = enumerate_symmetries(SymmetryClass(variant))
    gt = RigidTransform(random_rotation(rng), np.zeros(3))
    est = RigidTransform(random_rotation(rng), np.zeros(3))
    q = RigidTransform(random_rotation(rng), np.zeros(3))
    a = closest_symmetric_pose(gt, est, syms)[1]
    b = closest_symmetric_pose(q @ gt, q @ est, syms)[1]
    assert rotation_angle(a.rotation @ est.rotation.T) == pytest.approx(
        rotation_angle(b.rotation @ (q @ est).rotation.T), abs=1e-9)


@given(seeds)
def test_symmetric_angle_lower_bounds_any_member(seed):
    rng = np.random.default_rng(seed)
    syms = enumerate_symmetries(SymmetryClass("cuboid"))
    gt = RigidTransform(random_rotation(rng), np.zeros(3))
    est = RigidTransform(random_rotation(rng), np.zeros(3))
    best = symmetric_residual_angle(gt, est, syms)
    for s in syms:
        assert rotation_angle(gt.rotation @ s @ est.rotation.T) >= best - 1e-9
