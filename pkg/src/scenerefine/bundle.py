"""Scene bundles on disk: scene.json, camera.json, meshes/*.obj and the observation images."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datagen import PrimitiveSpec, SyntheticObject, SyntheticScene
from .geometry import ObjectModel, RigidTransform
from .images import load_labels_png, load_pfm, save_labels_png, save_pfm
from .meshio import load_mesh, save_obj
from .scoring import CameraIntrinsics
from .symmetry import SymmetryClass

SCENE_SCHEMA = "scenerefine.scene"
SCENE_VERSION = 1


class BundleError(ValueError):
    pass


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_bundle(scene: SyntheticScene, out_dir, inits=None) -> Path:
    """Write one scene; ``inits`` optionally maps object ids to initial estimates."""
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    objects = []
    for o in scene.objects:
        mesh_rel = f"meshes/object_{o.object_id:03d}.obj"
        save_obj(o.model.mesh, out / mesh_rel)
        entry = {
            "object_id": o.object_id,
            "name": o.model.name,
            "class_id": o.model.class_id,
            "mesh": mesh_rel,
            "target_points": len(o.model.target_cloud),
            "target_seed": o.target_seed,
            "gt": o.gt.to_dict(),
            "com": o.model.com.tolist(),
            **o.model.symmetry.to_dict(),
        }
        if o.spec is not None:
            entry["primitive"] = {"kind": o.spec.kind, "dims": list(o.spec.dims)}
        if inits is not None and o.object_id in inits:
            entry["init"] = inits[o.object_id].to_dict()
        objects.append(entry)
    doc = {
        "schema": SCENE_SCHEMA,
        "version": SCENE_VERSION,
        "seed": scene.seed,
        "camera_pose": scene.camera_pose.to_dict(),
        "plane": scene.plane.to_dict(),
        "gravity": scene.gravity.tolist(),
        "objects": objects,
    }
    dump_json(doc, out / "scene.json")
    dump_json(scene.cam.to_dict(), out / "camera.json")
    save_pfm(out / "depth.pfm", scene.depth)
    save_pfm(out / "normals.pfm", scene.normals)
    save_labels_png(out / "labels.png", scene.labels)
    return out


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise BundleError(f"missing file: {path}") from None
    except json.JSONDecodeError as e:
        raise BundleError(f"{path}: invalid JSON ({e})") from None


def load_bundle(path):
    """Read a bundle back into a ``SyntheticScene`` plus the stored initial estimates."""
    root = Path(path)
    doc = _read_json(root / "scene.json")
    if doc.get("schema") != SCENE_SCHEMA:
        raise BundleError(f"{root}: scene.json has no {SCENE_SCHEMA!r} schema tag")
    if doc.get("version") != SCENE_VERSION:
        raise BundleError(f"{root}: unsupported scene schema version {doc.get('version')}")
    cam = CameraIntrinsics.from_dict(_read_json(root / "camera.json"))
    objects, inits = [], {}
    try:
        if "camera_pose" in doc:
            cam_pose = RigidTransform.from_dict(doc["camera_pose"])
        else:
            cam_pose = RigidTransform.from_dict(doc["plane"]["pose"]).inverse()
        for e in doc["objects"]:
            mesh = load_mesh(root / e["mesh"])
            sym = SymmetryClass.from_dict(e)
            model = ObjectModel.from_mesh(mesh, sym, int(e.get("target_points", 1024)),
                                          seed=int(e.get("target_seed", 0)), class_id=int(e.get("class_id", 0)),
                                          com=e.get("com"), name=e.get("name", ""))
            spec = None
            if "primitive" in e:
                spec = PrimitiveSpec(e["primitive"]["kind"], tuple(e["primitive"]["dims"]))
            gt = RigidTransform.from_dict(e["gt"])
            obj = SyntheticObject(spec, model, cam_pose @ gt, gt, int(e["object_id"]), int(e.get("target_seed", 0)))
            objects.append(obj)
            if "init" in e:
                inits[obj.object_id] = RigidTransform.from_dict(e["init"])
    except (KeyError, TypeError) as err:
        raise BundleError(f"{root}: malformed scene.json ({err!r})") from None
    for name in ("depth.pfm", "normals.pfm", "labels.png"):
        if not (root / name).exists():
            raise BundleError(f"missing file: {root / name}")
    scene = SyntheticScene(cam, cam_pose, objects,
                           load_pfm(root / "depth.pfm"), load_pfm(root / "normals.pfm"),
                           load_labels_png(root / "labels.png"), int(doc.get("seed", 0)),
                           np.asarray(doc.get("gravity", (0.0, 0.0, -1.0)), dtype=float))
    if scene.depth.shape != (cam.height, cam.width) or scene.labels.shape != scene.depth.shape:
        raise BundleError(f"{root}: image size does not match camera.json")
    return scene, inits


def find_bundles(root) -> list:
    root = Path(root)
    if (root / "scene.json").exists():
        return [root]
    found = sorted(p.parent for p in root.glob("*/scene.json"))
    if not found:
        raise BundleError(f"no scene bundles under {root}")
    return found


def pose_table(poses: dict) -> dict:
    return {str(k): v.to_dict() for k, v in sorted(poses.items())}


def read_pose_table(path) -> dict:
    doc = _read_json(path)
    table = doc.get("poses", doc)
    return {int(k): RigidTransform.from_dict(v) for k, v in table.items()}

