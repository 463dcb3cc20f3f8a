from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from scenerefine.bundle import BundleError, dump_json, find_bundles, load_bundle, pose_table, read_pose_table, save_bundle
from scenerefine.datagen import ScenarioConfig, box_mesh, generate_scene
from scenerefine.geometry import PointCloud, RigidTransform
from scenerefine.images import load_labels_png, load_pfm, load_pgm16, save_labels_png, save_pfm, save_pgm16
from scenerefine.meshio import MeshFormatError, load_mesh, load_obj, load_ply, save_obj, save_ply_points


def test_obj_round_trip(tmp_path):
    mesh = box_mesh(0.1, 0.2, 0.3)
    save_obj(mesh, tmp_path / "b.obj")
    back = load_obj(tmp_path / "b.obj")
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.faces, mesh.faces)


def test_obj_quads_and_negative_indices(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf -4//1 -3//1 -2//1 -1//1\n")
    mesh = load_mesh(tmp_path / "q.obj")
    np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])
    assert mesh.area == pytest.approx(1.0)
    (tmp_path / "empty.obj").write_text("v 0 0 0\n")
    with pytest.raises(MeshFormatError):
        load_obj(tmp_path / "empty.obj")
    with pytest.raises(MeshFormatError):
        load_mesh(tmp_path / "x.stl")


def _ply_header(fmt, n_vert, n_face):
    return (f"ply\nformat {fmt} 1.0\ncomment test\nelement vertex {n_vert}\nproperty float x\nproperty float y\n"
            f"property float z\nproperty uchar red\nelement face {n_face}\n"
            "property list uchar int vertex_indices\nend_header\n")


QUAD = np.array([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)], float)


def test_ply_ascii(tmp_path):
    body = "".join(f"{x} {y} {z} 255\n" for x, y, z in QUAD) + "4 0 1 2 3\n"
    (tmp_path / "a.ply").write_text(_ply_header("ascii", 4, 1) + body)
    mesh = load_ply(tmp_path / "a.ply")
    np.testing.assert_array_equal(mesh.vertices, QUAD)
    np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])


@pytest.mark.parametrize("fmt, e", [("binary_little_endian", "<"), ("binary_big_endian", ">")])
def test_ply_binary(tmp_path, fmt, e):
    body = b"".join(struct.pack(e + "fffB", *v, 7) for v in QUAD)
    body += struct.pack(e + "Biii", 3, 0, 1, 2) + struct.pack(e + "Biii", 3, 0, 2, 3)
    (tmp_path / "b.ply").write_bytes(_ply_header(fmt, 4, 2).encode() + body)
    mesh = load_mesh(tmp_path / "b.ply")
    np.testing.assert_array_equal(mesh.vertices, QUAD)
    np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])


def test_ply_errors(tmp_path):
    (tmp_path / "n.ply").write_text("obj\n")
    with pytest.raises(MeshFormatError):
        load_ply(tmp_path / "n.ply")
    (tmp_path / "t.ply").write_text("ply\nformat ascii 1.0\n")
    with pytest.raises(MeshFormatError):
        load_ply(tmp_path / "t.ply")


def test_point_cloud_ply(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(10, 3))
    nrm = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    save_ply_points(PointCloud(pts, nrm), tmp_path / "c.ply", {"d": np.arange(10)})
    data = (tmp_path / "c.ply").read_bytes()
    header, payload = data.split(b"end_header\n")
    assert b"property float d" in header
    arr = np.frombuffer(payload, "<f4").reshape(10, 7)
    np.testing.assert_allclose(arr[:, :3], pts, rtol=1e-6)
    np.testing.assert_array_equal(arr[:, 6], np.arange(10))


def test_pfm_round_trip(tmp_path, rng):
    gray = rng.random((5, 7)).astype(np.float32)
    save_pfm(tmp_path / "g.pfm", gray)
    np.testing.assert_array_equal(load_pfm(tmp_path / "g.pfm"), gray)
    color = rng.random((4, 3, 3)).astype(np.float32)
    save_pfm(tmp_path / "c.pfm", color)
    np.testing.assert_array_equal(load_pfm(tmp_path / "c.pfm"), color)
    with pytest.raises(ValueError):
        save_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))
    (tmp_path / "bad.pfm").write_bytes(b"P6\n1 1\n255\n\x00")
    with pytest.raises(ValueError):
        load_pfm(tmp_path / "bad.pfm")


def test_pgm_millimetres(tmp_path):
    depth = np.array([[0.0, 0.5004], [1.2346, 70.0]])
    save_pgm16(tmp_path / "d.pgm", depth)
    np.testing.assert_array_equal(load_pgm16(tmp_path / "d.pgm"), [[0.0, 0.5], [1.235, 65.535]])


def test_label_png(tmp_path):
    labels = np.array([[0, 1, 300], [65535, 2, 0]])
    save_labels_png(tmp_path / "l.png", labels)
    np.testing.assert_array_equal(load_labels_png(tmp_path / "l.png"), labels)
    with pytest.raises(ValueError):
        save_labels_png(tmp_path / "l.png", labels - 1)


# bundles


@pytest.fixture(scope="module")
def scene():
    return generate_scene(ScenarioConfig(min_objects=2, max_objects=2), seed=5)


def test_bundle_round_trip(tmp_path, scene):
    inits = {scene.objects[0].object_id: RigidTransform.from_rotvec((0.1, 0, 0), (0.01, 0, 0.5))}
    save_bundle(scene, tmp_path / "s")
    save_bundle(scene, tmp_path / "s", inits)
    back, back_inits = load_bundle(tmp_path / "s")
    assert back.seed == scene.seed
    assert back.camera_pose.allclose(scene.camera_pose, atol=1e-15)
    assert len(back.objects) == len(scene.objects)
    for a, b in zip(back.objects, scene.objects):
        assert a.object_id == b.object_id and a.spec == b.spec
        assert a.gt.allclose(b.gt, atol=1e-15)
        np.testing.assert_array_equal(a.model.target_cloud.points, b.model.target_cloud.points)
        assert a.model.symmetry.variant == b.model.symmetry.variant
    assert back_inits.keys() == inits.keys()
    np.testing.assert_array_equal(back.labels, scene.labels)
    np.testing.assert_allclose(back.depth, scene.depth, rtol=1e-6)
    assert find_bundles(tmp_path) == [tmp_path / "s"]
    assert find_bundles(tmp_path / "s") == [tmp_path / "s"]


def test_bundle_is_byte_stable(tmp_path, scene):
    save_bundle(scene, tmp_path / "a")
    save_bundle(scene, tmp_path / "b")
    for f in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_bundle_errors(tmp_path, scene):
    with pytest.raises(BundleError, match="missing"):
        load_bundle(tmp_path)
    with pytest.raises(BundleError):
        find_bundles(tmp_path)
    root = save_bundle(scene, tmp_path / "s")
    doc = json.loads((root / "scene.json").read_text())
    (root / "scene.json").write_text("{not json")
    with pytest.raises(BundleError, match="invalid JSON"):
        load_bundle(root)
    dump_json({**doc, "version": 99}, root / "scene.json")
    with pytest.raises(BundleError, match="version"):
        load_bundle(root)
    del doc["objects"][0]["gt"]
    dump_json(doc, root / "scene.json")
    with pytest.raises(BundleError, match="malformed"):
        load_bundle(root)


def test_pose_table_round_trip(tmp_path):
    poses = {3: RigidTransform.from_rotvec((0, 0.2, 0), (1, 2, 3)), 1: RigidTransform.identity()}
    dump_json({"poses": pose_table(poses)}, tmp_path / "p.json")
    back = read_pose_table(tmp_path / "p.json")
    assert sorted(back) == [1, 3]
    assert back[3].allclose(poses[3], atol=1e-15)
