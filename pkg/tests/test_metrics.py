from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import add_brute, adi_brute, auc_brute

from scenerefine.datagen import cylinder_mesh
from scenerefine.geometry import ObjectModel, PointCloud, RigidTransform, axis_rotation, random_rotation
from scenerefine.metrics import (
    EvalRecord,
    add_distance,
    adi_distance,
    auc,
    evaluate_pose,
    recall_at,
    summarize,
)

seeds = st.integers(0, 2**32 - 1)


def random_pose(rng, spread=0.1):
    return RigidTransform(random_rotation(rng), rng.normal(scale=spread, size=3))


def records(errors, diameter=1.0, cls=0, symmetric=False):
    return [EvalRecord(cls, e, e, diameter, symmetric) for e in errors]


def test_add_examples(rng):
    m = rng.normal(size=(200, 3))
    gt = random_pose(rng)
    assert add_distance(m, gt, gt) == 0.0
    moved = RigidTransform(gt.rotation, gt.translation + (0.01, 0, 0))
    assert add_distance(m, gt, moved) == pytest.approx(0.01, abs=1e-15)
    assert adi_distance(m, gt, gt) == 0.0


@given(seeds)
def test_distances_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(scale=0.05, size=(60, 3))
    gt, est = random_pose(rng), random_pose(rng)
    assert abs(add_distance(m, gt, est) - add_brute(m, gt, est)) <= 1e-12
    assert abs(adi_distance(m, gt, est) - adi_brute(m, gt, est)) <= 1e-12


def test_adi_never_exceeds_add():
    rng = np.random.default_rng(5)
    m = rng.normal(scale=0.05, size=(100, 3))
    for _ in range(1000):
        gt, est = random_pose(rng), random_pose(rng)
        assert adi_distance(m, gt, est) <= add_distance(m, gt, est) + 1e-15


def test_cylinder_spin_is_invisible_to_adi():
    model = ObjectModel.from_mesh(cylinder_mesh(0.04, 0.1, 128), None, 8192, seed=2)
    gt = RigidTransform(np.eye(3), (0, 0, 0.5))
    spacing = np.sqrt(model.mesh.area / len(model.target_cloud))
    for theta in (0.3, 1.0, 2.5):
        est = RigidTransform(axis_rotation("z", theta), gt.translation)
        assert adi_distance(model, gt, est) < spacing
        assert add_distance(model, gt, est) > 0.01


@given(seeds)
def test_common_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(scale=0.05, size=(50, 3))
    gt, est, common = random_pose(rng), random_pose(rng), random_pose(rng, 1.0)
    assert add_distance(m, common @ gt, common @ est) == pytest.approx(add_distance(m, gt, est), abs=1e-12)
    assert adi_distance(m, common @ gt, common @ est) == pytest.approx(adi_distance(m, gt, est), abs=1e-12)


def test_model_inputs():
    pts = np.random.default_rng(0).normal(size=(20, 3))
    gt, est = RigidTransform.identity(), RigidTransform.from_rotvec((0, 0, 0.2))
    ref = add_distance(pts, gt, est)
    assert add_distance(PointCloud(pts), gt, est) == ref
    with pytest.raises(ValueError):
        add_distance(np.zeros((0, 3)), gt, est)


# recall and AUC


def test_recall_examples():
    assert recall_at(records([0.0, 0.0, 0.0]), 0.1) == 1.0
    assert recall_at([EvalRecord(0, 0.05, 0.05, 1.0)], 0.02) == 0.0
    mixed = [EvalRecord(0, 0.01, 0.01, 0.2), EvalRecord(0, 0.03, 0.01, 0.2, True), EvalRecord(0, 0.03, 0.02, 0.2)]
    # AD uses ADI only for the symmetric record: errors 0.01, 0.01, 0.03 against 0.1 * 0.2
    assert recall_at(mixed, 0.1) == pytest.approx(2 / 3)
    assert recall_at(mixed, 0.1, "add") == pytest.approx(1 / 3)
    assert recall_at(mixed, 0.1, "adi") == 1.0
    with pytest.raises(ValueError):
        recall_at([], 0.1)


@given(st.lists(st.floats(0, 0.2), min_size=1, max_size=30), st.floats(0, 0.2), st.floats(0, 0.2))
def test_recall_monotone(errors, a, b):
    lo, hi = sorted((a, b))
    recs = records(errors)
    assert recall_at(recs, lo) <= recall_at(recs, hi)


def test_auc_examples():
    assert auc(records([0.0, 0.0])) == 1.0
    assert auc(records([0.05]), 0.1, 1000) == pytest.approx(0.5, abs=1e-3 + 1e-12)
    assert auc(records([0.5]), 0.1, 1000) == 0.0
    with pytest.raises(ValueError):
        auc([])
    with pytest.raises(ValueError):
        auc(records([0.0]), bins=0)


@given(st.lists(st.floats(0, 0.15), min_size=1, max_size=40), st.integers(1, 300))
def test_auc_matches_brute_force(errors, bins):
    assert abs(auc(records(errors), 0.1, bins) - auc_brute(errors, 0.1, bins)) <= 1.0 / bins


def test_auc_converges_to_cdf_integral(rng):
    errors = rng.uniform(0, 0.12, 200)
    exact = np.mean(np.clip((0.1 - errors) / 0.1, 0, 1))
    coarse, fine = auc(records(errors), 0.1, 100), auc(records(errors), 0.1, 10000)
    assert abs(coarse - fine) < 1e-2
    assert abs(fine - exact) < 1e-3


def test_auc_is_mean_recall_over_bin_edges(rng):
    # with unit diameters absolute thresholds and diameter fractions coincide
    recs = records(rng.uniform(0, 0.12, 50))
    edges = 0.1 * np.arange(1, 51) / 50
    assert auc(recs, 0.1, 50) == pytest.approx(np.mean([recall_at(recs, t) for t in edges]), abs=1e-15)
    # one shared error on a bin edge: recall is 1 from that edge on
    assert auc(records([0.03] * 5), 0.1, 10) == pytest.approx(0.8)


def test_relative_auc():
    recs = [EvalRecord(0, 0.005, 0.005, 0.1), EvalRecord(0, 0.02, 0.02, 0.4)]
    # both errors are 0.05 of their diameter
    assert auc(recs, 0.1, 1000, relative=True) == pytest.approx(0.5, abs=1e-3 + 1e-12)


def test_summary_structure():
    rng = np.random.default_rng(1)
    m = rng.normal(scale=0.05, size=(50, 3))
    recs = []
    for cls in (0, 0, 1):
        gt = random_pose(rng)
        est = RigidTransform(gt.rotation, gt.translation + (0.002, 0, 0))
        recs.append(evaluate_pose(m, gt, est, 0.1, symmetric=cls == 1, object_class=cls))
    s = summarize(recs)
    assert set(s["per_class"]) == {"0", "1"}
    assert s["per_class"]["0"]["count"] == 2
    assert s["per_class"]["0"]["ad_recall_0.10d"] == 1.0
    assert s["mean"]["count"] == 3
    assert 0.0 <= s["mean"]["ad_auc"] <= 1.0
