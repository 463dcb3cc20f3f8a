"""Synthetic ground-truthed tabletop scenes, observations and training perturbations."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    ObjectModel,
    PointCloud,
    RigidTransform,
    TriangleMesh,
    axis_rotation,
    random_unit_vector,
    rotvec_to_matrix,
)
from .plausibility import (
    EPSILON,
    PlaneFrameScene,
    PlaneModel,
    SceneObject,
    SceneState,
    scene_plausibility,
    surface_distance,
)
from .scoring import CameraIntrinsics, rasterize
from .symmetry import SymmetryClass

PRIMITIVES = ("box", "cylinder", "lshape")
CLASS_IDS = {"box": 0, "cylinder": 1, "lshape": 2}
DEFAULT_CAMERA = CameraIntrinsics(300.0, 300.0, 159.5, 119.5, 320, 240)


class PlacementError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# primitive meshes


def extrude_polygon(poly, height: float) -> TriangleMesh:
    """Closed prism over a counter-clockwise polygon, caps fan-triangulated from vertex 0."""
    poly = np.asarray(poly, dtype=float)
    n = len(poly)
    h = height / 2.0
    verts = np.vstack([np.column_stack([poly, np.full(n, -h)]), np.column_stack([poly, np.full(n, h)])])
    faces = []
    for i in range(1, n - 1):
        faces.append((0, i + 1, i))  # bottom, facing -z
        faces.append((n, n + i, n + i + 1))  # top, facing +z
    for i in range(n):
        j = (i + 1) % n
        faces.append((i, j, n + j))
        faces.append((i, n + j, n + i))
    return TriangleMesh(verts, np.array(faces))


def centered(mesh: TriangleMesh) -> TriangleMesh:
    return TriangleMesh(mesh.vertices - mesh.volume_centroid(), mesh.faces)


def box_mesh(sx: float, sy: float, sz: float) -> TriangleMesh:
    x, y = sx / 2, sy / 2
    return extrude_polygon([(-x, -y), (x, -y), (x, y), (-x, y)], sz)


def cylinder_mesh(radius: float, height: float, segments: int = 32) -> TriangleMesh:
    a = 2 * np.pi * np.arange(segments) / segments
    return extrude_polygon(np.column_stack([radius * np.cos(a), radius * np.sin(a)]), height)


def lshape_mesh(long_leg: float, short_leg: float, width: float, thickness: float) -> TriangleMesh:
    """L-bracket lying in the xy-plane, re-centred on its volume centroid."""
    poly = [(0, 0), (long_leg, 0), (long_leg, width), (width, width), (width, short_leg), (0, short_leg)]
    return centered(extrude_polygon(poly, thickness))


@dataclass(frozen=True)
class PrimitiveSpec:
    kind: str
    dims: tuple

    def mesh(self) -> TriangleMesh:
        if self.kind == "box":
            return box_mesh(*self.dims)
        if self.kind == "cylinder":
            return cylinder_mesh(*self.dims)
        if self.kind == "lshape":
            return lshape_mesh(*self.dims)
        raise ValueError(f"unknown primitive {self.kind!r}")

    def symmetry(self, resolution_deg: float = 5.0) -> SymmetryClass:
        if self.kind == "cylinder":
            return SymmetryClass("cylindrical", resolution_deg)
        if self.kind == "box":
            sx, sy, _ = self.dims
            return SymmetryClass("cuboid" if abs(sx - sy) < 1e-12 else "box")
        return SymmetryClass("none")

    def resting_rotations(self) -> list:
        """Model-to-plane rotations (before yaw) under which the primitive lies on a face."""
        rx = lambda a: axis_rotation("x", a)  # noqa: E731
        ry = lambda a: axis_rotation("y", a)  # noqa: E731
        if self.kind == "box":
            return [np.eye(3), rx(np.pi), rx(np.pi / 2), rx(-np.pi / 2), ry(np.pi / 2), ry(-np.pi / 2)]
        if self.kind == "cylinder":
            return [np.eye(3), rx(np.pi / 2)]
        return [np.eye(3), rx(np.pi)]


def random_primitive(kind: str, rng: np.random.Generator) -> PrimitiveSpec:
    if kind == "box":
        if rng.random() < 0.3:
            s = rng.uniform(0.05, 0.09)
            return PrimitiveSpec("box", (s, s, rng.uniform(0.06, 0.12)))
        return PrimitiveSpec("box", tuple(rng.uniform(0.04, 0.12, size=3)))
    if kind == "cylinder":
        return PrimitiveSpec("cylinder", (rng.uniform(0.025, 0.045), rng.uniform(0.06, 0.14)))
    if kind == "lshape":
        long_leg = rng.uniform(0.08, 0.12)
        return PrimitiveSpec("lshape", (long_leg, rng.uniform(0.05, 0.07), rng.uniform(0.025, 0.035),
                                        rng.uniform(0.02, 0.03)))
    raise ValueError(f"unknown primitive {kind!r}")


# --------------------------------------------------------------------------
# scene generation


@dataclass(frozen=True)
class ScenarioConfig:
    min_objects: int = 1
    max_objects: int = 4
    primitives: tuple = PRIMITIVES
    plane_extent: float = 0.15
    camera_distance: tuple = (0.5, 0.75)
    camera_elevation_deg: tuple = (40.0, 75.0)
    depth_noise: float = 0.0
    stack_probability: float = 0.3
    points_per_object: int = 1024
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("object count range must satisfy 1 <= min <= max")
        if not self.primitives:
            raise ValueError("primitives: at least one primitive type is required")
        for p in self.primitives:
            if p not in PRIMITIVES:
                raise ValueError(f"primitives: unknown primitive {p!r}")
        if self.depth_noise < 0:
            raise ValueError("depth_noise must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d) -> ScenarioConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


@dataclass
class SyntheticObject:
    spec: PrimitiveSpec
    model: ObjectModel
    world_pose: RigidTransform  # model -> plane frame
    gt: Optional[RigidTransform] = None  # model -> camera
    object_id: int = 0
    target_seed: int = 0


@dataclass
class SyntheticScene:
    cam: CameraIntrinsics
    camera_pose: RigidTransform  # camera -> plane frame
    objects: list = field(default_factory=list)
    depth: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    seed: int = 0
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))

    @property
    def plane(self) -> PlaneModel:
        return PlaneModel(self.camera_pose.inverse(), 0)

    def gt_state(self) -> SceneState:
        """Scene with estimates at ground truth and target clouds as stand-in sources."""
        objs = [
            SceneObject(o.model, o.model.target_cloud.transformed(o.gt), o.gt, o.gt, o.object_id)
            for o in self.objects
        ]
        return SceneState(self.plane, objs, self.gravity)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose of a camera at ``position`` looking at ``target`` (x right, y down)."""
    pos = np.asarray(position, float)
    z = np.asarray(target, float) - pos
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, float))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), pos)


def _plane_frame_scene(models, poses) -> PlaneFrameScene:
    targets = [m.target_cloud.transformed(p) for m, p in zip(models, poses)]
    coms = [p.apply(m.com) for m, p in zip(models, poses)]
    return PlaneFrameScene([None] * len(targets), targets, coms, np.array([0.0, 0.0, -1.0]))


def drop_height(model: ObjectModel, pose: RigidTransform, placed_models, placed_poses,
                tol: float = 0.002, iterations: int = 30) -> float:
    """Lowest lift of ``pose`` along +z at which no target point lies deeper than ``tol`` in the scene."""
    pf = _plane_frame_scene(placed_models, placed_poses) if placed_models else None

    def penetrates(lift):
        pts = model.target_cloud.points @ pose.rotation.T + pose.translation + (0, 0, lift)
        if pts[:, 2].min() < -tol:
            return True
        return pf is not None and surface_distance(pts, pf).distance.min() < -tol

    if not penetrates(0.0):
        return 0.0
    hi = 0.05 + max(p.apply(m.mesh.vertices)[:, 2].max() for m, p in zip(placed_models, placed_poses))
    lo = 0.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if penetrates(mid):
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-4:
            break
    return hi


def _clearance(model, pose, others, poses) -> np.ndarray:
    pts = pose.apply(model.target_cloud.points)
    return np.array([cKDTree(p.apply(m.target_cloud.points)).query(pts, k=1)[0].min()
                     for m, p in zip(others, poses)])


def _supports_top(spec: PrimitiveSpec, rest_rot) -> bool:
    if spec.kind == "box":
        return True
    if spec.kind == "cylinder":
        return np.allclose(rest_rot, np.eye(3))
    return False


def generate_scene(cfg: ScenarioConfig, cam: CameraIntrinsics = DEFAULT_CAMERA, seed: Optional[int] = None,
                   epsilon: float = EPSILON) -> SyntheticScene:
    """Place primitives on the plane (or stacked) and accept only all-stable configurations."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_retries):
        scene = _try_generate(cfg, cam, rng, seed, epsilon)
        if scene is not None:
            return scene
    raise PlacementError(f"could not place a stable scene after {cfg.max_retries} attempts")


def _try_generate(cfg, cam, rng, seed, epsilon):
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    models, poses, specs, tops, seeds = [], [], [], [], []
    for i in range(count):
        placed = False
        for _ in range(30):
            kind = cfg.primitives[int(rng.integers(len(cfg.primitives)))]
            spec = random_primitive(kind, rng)
            target_seed = int(rng.integers(2**31))
            model = ObjectModel.from_mesh(spec.mesh(), spec.symmetry(), cfg.points_per_object,
                                          seed=target_seed, class_id=CLASS_IDS[kind], name=kind)
            rests = spec.resting_rotations()
            rest = rests[int(rng.integers(len(rests)))]
            yaw = axis_rotation("z", rng.uniform(0, 2 * np.pi))
            rot = yaw @ rest
            supporter = None
            candidates = [j for j, t in enumerate(tops) if t]
            if candidates and rng.random() < cfg.stack_probability:
                supporter = candidates[int(rng.integers(len(candidates)))]
                xy = poses[supporter].translation[:2] + rng.uniform(-0.01, 0.01, size=2)
            else:
                xy = rng.uniform(-cfg.plane_extent, cfg.plane_extent, size=2)
            base_z = -(model.mesh.vertices @ rot.T)[:, 2].min()
            pose = RigidTransform(rot, (xy[0], xy[1], base_z))
            if supporter is not None:
                pose = RigidTransform(rot, pose.translation + (0, 0, drop_height(model, pose, models, poses)))
            if models:
                clear = _clearance(model, pose, models, poses)
                others = [j for j in range(len(models)) if j != supporter]
                if any(clear[j] < 3 * epsilon for j in others):
                    continue
                if supporter is not None and clear[supporter] > epsilon:
                    continue
            models.append(model)
            seeds.append(target_seed)
            poses.append(pose)
            specs.append(spec)
            tops.append(_supports_top(spec, rest) and supporter is None)
            placed = True
            break
        if not placed:
            return None

    pf = _plane_frame_scene(models, poses)
    if not all(p.verdict.stable for p in scene_plausibility(pf, epsilon)):
        return None

    dist = rng.uniform(*cfg.camera_distance)
    elev = np.deg2rad(rng.uniform(*cfg.camera_elevation_deg))
    azim = rng.uniform(0, 2 * np.pi)
    position = dist * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)])
    look = np.append(rng.uniform(-0.03, 0.03, size=2), 0.0)
    cam_pose = look_at(position, look)
    world_to_cam = cam_pose.inverse()
    objects = [
        SyntheticObject(s, m, p, world_to_cam @ p, i + 1, ts)
        for i, (s, m, p, ts) in enumerate(zip(specs, models, poses, seeds))
    ]
    scene = SyntheticScene(cam, cam_pose, objects, seed=seed)
    render_observation(scene, cfg.depth_noise, seed=int(rng.integers(2**31)))
    return scene


# --------------------------------------------------------------------------
# observations


def plane_mesh(half_extent: float = 2.0) -> TriangleMesh:
    e = half_extent
    return TriangleMesh(np.array([(-e, -e, 0), (e, -e, 0), (e, e, 0), (-e, e, 0)], float),
                        np.array([(0, 1, 2), (0, 2, 3)]))


def render_observation(scene: SyntheticScene, sigma: float = 0.0, seed: int = 0, include_plane: bool = True):
    """Fused z-buffer of the plane and all objects with additive Gaussian depth noise.

    Labels are object ids, 0 for the plane and empty pixels. The result is stored
    on the scene and returned as ``(depth, normals, labels)``.
    """
    w2c = scene.camera_pose.inverse()
    items = [(o.model.mesh, o.gt, o.object_id) for o in scene.objects]
    if include_plane:
        items.insert(0, (plane_mesh(), w2c, 0))
    depth, normals, labels = rasterize(items, scene.cam)
    if sigma > 0:
        rng = np.random.default_rng(seed)
        valid = depth > 0
        depth = depth.copy()
        depth[valid] += rng.normal(0.0, sigma, size=int(valid.sum()))
        depth[valid] = np.maximum(depth[valid], 1e-6)
    scene.depth, scene.normals, scene.labels = depth, normals, labels
    return depth, normals, labels


def solo_mask(scene: SyntheticScene, index: int) -> np.ndarray:
    obj = scene.objects[index]
    d, _, _ = rasterize([(obj.model.mesh, obj.gt, 1)], scene.cam)
    return d > 0


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    foreground_range: tuple = (0.5, 1.0)
    rotation_max_deg: float = 90.0
    translation_max: float = 1.0
    plane_rotation_max_deg: float = 5.0
    plane_translation_max: float = 0.02
    points_per_object: int = 1024
    presample: int = 4096

    def __post_init__(self):
        lo, hi = self.foreground_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError("foreground range must satisfy 0 <= lo <= hi <= 1")


@dataclass(frozen=True)
class SegmentationSample:
    rows: np.ndarray
    cols: np.ndarray
    foreground: np.ndarray
    center: tuple


def augment_segmentation(labels, object_id: int, p: float, n: int, seed: int = 0,
                         presample: int = 4096) -> SegmentationSample:
    """Nearest ``ceil(p n)`` foreground and ``n - ceil(p n)`` background pixels around a random mask pixel.

    Background candidates are limited to the bounding box of the mask; both sets are
    first subsampled to at most ``presample`` pixels.
    """
    labels = np.asarray(labels)
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    mask = labels == object_id
    if not mask.any():
        raise ValueError(f"object {object_id} has an empty mask")
    rng = np.random.default_rng(seed)
    fr, fc = np.nonzero(mask)
    r0, r1, c0, c1 = fr.min(), fr.max(), fc.min(), fc.max()
    box = np.zeros_like(mask)
    box[r0 : r1 + 1, c0 : c1 + 1] = True
    br, bc = np.nonzero(box & ~mask)

    def presampled(r, c):
        if len(r) > presample:
            keep = np.sort(rng.choice(len(r), presample, replace=False))
            r, c = r[keep], c[keep]
        return np.column_stack([r, c])

    fg = presampled(fr, fc)
    bg = presampled(br, bc)
    n_fg = math.ceil(round(p * n, 9))
    n_bg = n - n_fg
    if n_fg > len(fg) or n_bg > len(bg):
        raise ValueError(f"requested {n_fg}+{n_bg} pixels but only {len(fg)}+{len(bg)} are available")
    center = fg[int(rng.integers(len(fg)))]

    def nearest(cands, k):
        if k == 0:
            return cands[:0]
        d2 = ((cands - center) ** 2).sum(axis=1)
        order = np.lexsort((cands[:, 1], cands[:, 0], d2))
        return cands[order[:k]]

    f = nearest(fg, n_fg)
    b = nearest(bg, n_bg)
    pix = np.vstack([f, b])
    is_fg = np.r_[np.ones(len(f), bool), np.zeros(len(b), bool)]
    return SegmentationSample(pix[:, 0], pix[:, 1], is_fg, (int(center[0]), int(center[1])))


def augmentation_capacity(labels, object_id: int, presample: int = 4096) -> tuple:
    """Foreground and background candidate counts that ``augment_segmentation`` would see."""
    mask = np.asarray(labels) == object_id
    if not mask.any():
        return 0, 0
    rows, cols = np.nonzero(mask)
    box = mask[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1]
    return min(int(box.sum()), presample), min(int(box.size - box.sum()), presample)


def feasible_count(n: int, p: float, n_fg: int, n_bg: int) -> int:
    """Largest ``m <= n`` whose ``ceil(p m)`` / ``m - ceil(p m)`` split fits the available pixels."""
    for m in range(n, -1, -1):
        k = math.ceil(round(p * m, 9))
        if k <= n_fg and m - k <= n_bg:
            return m
    return 0


def _random_rotation_error(rng, max_rad):
    return rotvec_to_matrix(random_unit_vector(rng) * rng.uniform(0.0, max_rad))


def perturb_pose(gt: RigidTransform, cfg: AugmentationConfig, seed=0, scale: float = 1.0) -> RigidTransform:
    """Rotation about a uniform random axis by a uniform angle, plus a uniform-direction shift.

    The shift magnitude is uniform in ``[0, translation_max]`` normalized units times ``scale``.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rot = _random_rotation_error(rng, np.deg2rad(cfg.rotation_max_deg))
    shift = random_unit_vector(rng) * rng.uniform(0.0, cfg.translation_max) * scale
    return RigidTransform(rot @ gt.rotation, gt.translation + shift)


def perturb_plane(plane: PlaneModel, cfg: AugmentationConfig, seed=0) -> PlaneModel:
    """Jitter the plane pose about its origin; translation jitter is in metres."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rot = _random_rotation_error(rng, np.deg2rad(cfg.plane_rotation_max_deg))
    shift = random_unit_vector(rng) * rng.uniform(0.0, cfg.plane_translation_max)
    pose = plane.pose
    return PlaneModel(RigidTransform(rot @ pose.rotation, pose.translation + shift), plane.inlier_count)


# --------------------------------------------------------------------------
# scene -> refinement state


def object_source(scene: SyntheticScene, index: int, n: int, seed: int = 0, p: Optional[float] = None,
                  presample: int = 4096) -> PointCloud:
    """Observed cloud for one object: back-projected pixels with normals and fg/outlier labels.

    Without ``p`` the ground-truth visible mask is subsampled to ``n`` points. With ``p``
    the segmentation augmentation picks the pixels; when the mask's bounding box is too
    small for ``n`` pixels at that split, fewer are taken.
    """
    obj = scene.objects[index]
    cam = scene.cam
    rng = np.random.default_rng(seed)
    if p is None:
        rows, cols = np.nonzero((scene.labels == obj.object_id) & (scene.depth > 0))
        if len(rows) == 0:
            raise ValueError(f"object {obj.object_id} is not visible")
        if len(rows) > n:
            keep = np.sort(rng.choice(len(rows), n, replace=False))
            rows, cols = rows[keep], cols[keep]
        fg = np.ones(len(rows), dtype=bool)
    else:
        # small objects may not offer n pixels at this split; keep the split and take fewer
        m = feasible_count(n, p, *augmentation_capacity(scene.labels, obj.object_id, presample))
        if m == 0:
            raise ValueError(f"object {obj.object_id} is not visible")
        s = augment_segmentation(scene.labels, obj.object_id, p, m, int(rng.integers(2**31)), presample)
        rows, cols, fg = s.rows, s.cols, s.foreground
        valid = scene.depth[rows, cols] > 0
        rows, cols, fg = rows[valid], cols[valid], fg[valid]
    z = scene.depth[rows, cols]
    pts = np.column_stack([(cols - cam.cx) / cam.fx * z, (rows - cam.cy) / cam.fy * z, z])
    nrm = scene.normals[rows, cols]
    good = np.linalg.norm(nrm, axis=1) > 0.5
    nrm = np.where(good[:, None], nrm, (0.0, 0.0, -1.0))
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm, fg.astype(np.int64))


def visible_objects(scene: SyntheticScene, min_pixels: int = 50) -> list:
    return [i for i, o in enumerate(scene.objects) if int((scene.labels == o.object_id).sum()) >= min_pixels]


def build_state(scene: SyntheticScene, estimates=None, n: int = 1024, seed: int = 0, p: Optional[float] = None,
                plane: Optional[PlaneModel] = None, indices=None, presample: int = 4096) -> SceneState:
    """Refinement state from a synthetic scene; estimates default to ground truth."""
    indices = visible_objects(scene) if indices is None else list(indices)
    rng = np.random.default_rng(seed)
    objs = []
    for k, i in enumerate(indices):
        o = scene.objects[i]
        src = object_source(scene, i, n, int(rng.integers(2**31)), p, presample)
        est = o.gt if estimates is None else estimates[k]
        objs.append(SceneObject(o.model, src, est, o.gt, o.object_id))
    return SceneState(plane if plane is not None else scene.plane, objs, scene.gravity)
