"""Software depth/normal rendering and rendering-based pose scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import GeometryError, RigidTransform, TriangleMesh

NEAR = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def rays(self) -> np.ndarray:
        """Per-pixel ray directions with unit z, shape ``(h, w, 3)``; pixel centres at integers."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(float)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def backproject(self, depth, mask=None):
        """Camera-frame points of valid depth pixels and their ``(row, col)`` indices."""
        depth = np.asarray(depth, dtype=float)
        valid = depth > 0
        if mask is not None:
            valid &= mask
        rows, cols = np.nonzero(valid)
        z = depth[rows, cols]
        pts = np.column_stack([(cols - self.cx) / self.fx * z, (rows - self.cy) / self.fy * z, z])
        return pts, rows, cols

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d) -> CameraIntrinsics:
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


def rasterize(items: Sequence, cam: CameraIntrinsics):
    """Z-buffer a list of ``(mesh, pose, label)`` items.

    Returns ``(depth, normals, labels)``; empty pixels have depth 0, zero normal and
    label 0. Depth is the exact ray/triangle-plane intersection at pixel centres.
    Normals are face normals in the camera frame, flipped to face the camera.
    """
    h, w = cam.height, cam.width
    depth = np.full((h, w), np.inf)
    normals = np.zeros((h, w, 3))
    labels = np.zeros((h, w), dtype=np.int64)
    for mesh, pose, label in items:
        if len(mesh.faces) == 0:
            raise GeometryError("empty mesh")
        verts = pose.apply(mesh.vertices)
        fnorm = pose.apply_vectors(mesh.face_normals)
        tri = verts[mesh.faces]
        front = tri[:, :, 2] > NEAR
        ok = front.any(axis=1) & (np.abs(fnorm).sum(axis=1) > 0)
        for f in np.flatnonzero(ok):
            n = fnorm[f]
            a = tri[f, 0]
            pieces = [tri[f]] if front[f].all() else clip_near(tri[f])
            for piece in pieces:
                _raster_triangle(piece, n, a, label, cam, depth, normals, labels)
    depth[~np.isfinite(depth)] = 0.0
    return depth, normals, labels


def clip_near(tri, near: float = NEAR) -> list:
    """Split a triangle at the plane ``z = 2 near`` and keep the part in front of it."""
    z0 = 2 * near
    poly = []
    for i in range(3):
        p, q = tri[i], tri[(i + 1) % 3]
        if p[2] >= z0:
            poly.append(p)
        if (p[2] >= z0) != (q[2] >= z0):
            t = (z0 - p[2]) / (q[2] - p[2])
            poly.append(p + t * (q - p))
    return [np.array([poly[0], poly[i], poly[i + 1]]) for i in range(1, len(poly) - 1)]


def _raster_triangle(tri, n, a, label, cam, depth, normals, labels) -> None:
    """Write one camera-frame triangle into the buffers; ``n`` and ``a`` define its supporting plane."""
    h, w = depth.shape
    u = cam.fx * tri[:, 0] / tri[:, 2] + cam.cx
    v = cam.fy * tri[:, 1] / tri[:, 2] + cam.cy
    u0, u1 = max(int(np.ceil(u.min())), 0), min(int(np.floor(u.max())), w - 1)
    v0, v1 = max(int(np.ceil(v.min())), 0), min(int(np.floor(v.max())), h - 1)
    if u0 > u1 or v0 > v1:
        return
    area = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
    if abs(area) < 1e-12:
        return
    pv, pu = np.mgrid[v0 : v1 + 1, u0 : u1 + 1].astype(float)
    w0 = (u[1] - pu) * (v[2] - pv) - (u[2] - pu) * (v[1] - pv)
    w1 = (u[2] - pu) * (v[0] - pv) - (u[0] - pu) * (v[2] - pv)
    w2 = (u[0] - pu) * (v[1] - pv) - (u[1] - pu) * (v[0] - pv)
    s = np.sign(area)
    inside = (w0 * s >= 0) & (w1 * s >= 0) & (w2 * s >= 0)
    if not inside.any():
        return
    rx = (pu - cam.cx) / cam.fx
    ry = (pv - cam.cy) / cam.fy
    denom = n[0] * rx + n[1] * ry + n[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (n @ a) / denom
    inside &= np.isfinite(z) & (z > NEAR)
    sub = depth[v0 : v1 + 1, u0 : u1 + 1]
    closer = inside & (z < sub)
    if not closer.any():
        return
    sub[closer] = z[closer]
    facing = n if n @ a < 0 else -n
    normals[v0 : v1 + 1, u0 : u1 + 1][closer] = facing
    labels[v0 : v1 + 1, u0 : u1 + 1][closer] = label


def render(mesh: TriangleMesh, pose: RigidTransform, cam: CameraIntrinsics):
    """Depth and normal image of a single mesh under ``pose`` (model -> camera)."""
    depth, normals, _ = rasterize([(mesh, pose, 1)], cam)
    return depth, normals


@dataclass(frozen=True)
class ScoreConfig:
    tau_d: float = 0.02
    tau_n: float = 0.7

    def __post_init__(self):
        if not (self.tau_d > 0 and self.tau_n > 0):
            raise ValueError("score thresholds must be positive")


def score_map(rendered, observed, mask=None, cfg: ScoreConfig = ScoreConfig()):
    """Per-pixel scores and the evaluated domain.

    Pixels where only one image has data score 0.
    """
    rd, rn = rendered
    od, on = observed
    rd, od = np.asarray(rd, float), np.asarray(od, float)
    if rd.shape != od.shape or np.shape(rn) != np.shape(on) or np.shape(rn)[:2] != rd.shape:
        raise ValueError("image shapes do not match")
    domain = (rd > 0) | (od > 0)
    if mask is not None:
        domain &= np.asarray(mask, dtype=bool)
    both = (rd > 0) & (od > 0)
    e_d = 1.0 - np.minimum(1.0, np.abs(rd - od) / cfg.tau_d)
    cos = np.clip(np.einsum("hwc,hwc->hw", rn, on), 0.0, 1.0)
    e_n = 1.0 - np.minimum(1.0, (1.0 - cos) / cfg.tau_n)
    e = np.where(both, 0.5 * (e_d + e_n), 0.0)
    return e, domain


def score_pose(rendered, observed, mask=None, cfg: ScoreConfig = ScoreConfig()) -> float:
    """Mean per-pixel depth/normal agreement over the union of valid pixels inside ``mask``."""
    e, domain = score_map(rendered, observed, mask, cfg)
    if not domain.any():
        return 0.0
    return float(e[domain].mean())


def select_best_pose(poses, mesh: TriangleMesh, cam: CameraIntrinsics, observed, mask=None,
                     cfg: ScoreConfig = ScoreConfig()):
    """Highest-scoring pose of a trajectory (initial pose included); ties go to the latest.

    ``poses`` is a sequence of poses or anything with a ``poses()`` method.
    Returns ``(index, pose, scores)``.
    """
    if hasattr(poses, "poses"):
        poses = poses.poses()
    poses = list(poses)
    if not poses:
        raise ValueError("empty trajectory")
    scores = [score_pose(render(mesh, p, cam), observed, mask, cfg) for p in poses]
    best = max(scores)
    idx = max(i for i, s in enumerate(scores) if s == best)
    return idx, poses[idx], scores


def pixel_mask(shape, rows, cols) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[rows, cols] = True
    return m


def mask_from_labels(labels, object_id: int, restrict: Optional[np.ndarray] = None) -> np.ndarray:
    m = np.asarray(labels) == object_id
    if restrict is not None:
        m &= restrict
    return m
