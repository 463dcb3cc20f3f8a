"""Rigid-body math, point clouds, meshes and nearest-neighbour queries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation as _Rot

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


class DegenerateModelError(GeometryError):
    pass


def _orthonormalize(r):
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def is_rotation(r, tol=ORTHO_TOL):
    r = np.asarray(r, dtype=float)
    return (
        r.shape == (3, 3)
        and np.all(np.isfinite(r))
        and np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0)
        and abs(np.linalg.det(r) - 1.0) <= tol
    )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation in SO(3) plus translation; maps ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise GeometryError("non-finite transform")
        drift = np.abs(r.T @ r - np.eye(3)).max()
        if drift > 1e-3 or np.linalg.det(r) <= 0:
            raise GeometryError("rotation is not in SO(3)")
        if drift > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            r = _orthonormalize(r)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(rotvec_to_matrix(rotvec), translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def apply_vectors(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def allclose(self, other: RigidTransform, atol=1e-9) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol, rtol=0) and np.allclose(
            self.translation, other.translation, atol=atol, rtol=0
        )

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d) -> RigidTransform:
        return cls(np.asarray(d["rotation"], dtype=float), np.asarray(d["translation"], dtype=float))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def rotation_angle(r) -> float:
    """Geodesic angle of a rotation matrix in ``[0, pi]``.

    atan2 of the skew and trace parts keeps full precision near 0, where arccos
    of the trace alone bottoms out around 1e-8.
    """
    r = np.asarray(r, dtype=float)
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arctan2(s, c))


def rotvec_to_matrix(rotvec) -> np.ndarray:
    return _Rot.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix()


def matrix_to_rotvec(r) -> np.ndarray:
    return _Rot.from_matrix(np.asarray(r, dtype=float)).as_rotvec()


def axis_rotation(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    raise ValueError(f"unknown axis {axis!r}")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return _Rot.random(random_state=rng).as_matrix()


def random_unit_vector(rng: np.random.Generator, size=None) -> np.ndarray:
    shape = (3,) if size is None else (size, 3)
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# containers


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise GeometryError("non-finite points")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            n = np.array(self.normals, dtype=float).reshape(-1, 3)
            if len(n) != len(p):
                raise GeometryError("normals length mismatch")
            if len(n) and np.abs(np.linalg.norm(n, axis=1) - 1.0).max() > 1e-6:
                raise GeometryError("normals must be unit length")
            n.setflags(write=False)
            object.__setattr__(self, "normals", n)
        if self.labels is not None:
            lab = np.array(self.labels).reshape(-1)
            if len(lab) != len(p):
                raise GeometryError("labels length mismatch")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.points)

    def transformed(self, t: RigidTransform) -> PointCloud:
        normals = None if self.normals is None else t.apply_vectors(self.normals)
        return PointCloud(t.apply(self.points), normals, self.labels)

    def subset(self, idx) -> PointCloud:
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.labels is None else self.labels[idx],
        )


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_normals: np.ndarray = field(init=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        norm = np.linalg.norm(cross, axis=1)
        n = np.zeros_like(cross)
        ok = norm > 0
        n[ok] = cross[ok] / norm[ok, None]
        for a in (v, f, n):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "face_normals", n)

    @property
    def face_areas(self) -> np.ndarray:
        v, f = self.vertices, self.faces
        return 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    def transformed(self, t: RigidTransform) -> TriangleMesh:
        return TriangleMesh(t.apply(self.vertices), self.faces)

    def volume_centroid(self) -> np.ndarray:
        """Centre of mass of the enclosed solid (uniform density, closed mesh)."""
        v, f = self.vertices, self.faces
        a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        vol = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
        total = vol.sum()
        if abs(total) < 1e-15:
            raise DegenerateModelError("mesh encloses no volume")
        return (vol[:, None] * (a + b + c) / 4.0).sum(axis=0) / total


# --------------------------------------------------------------------------
# nearest neighbours and distances


def _as_points(x):
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=float).reshape(-1, 3)


def knn(query, cloud, k: int):
    """Exact k nearest neighbours of ``query`` in ``cloud``.

    Returns ``(indices, distances)`` sorted by ascending distance. ``query`` may be a
    single point or an ``(m, 3)`` array, in which case both outputs are ``(m, k)``.
    """
    pts = _as_points(cloud)
    if len(pts) == 0:
        raise GeometryError("empty cloud")
    if not 1 <= k <= len(pts):
        raise GeometryError(f"k={k} outside [1, {len(pts)}]")
    q = np.asarray(query, dtype=float)
    single = q.ndim == 1
    dist, idx = cKDTree(pts).query(q.reshape(-1, 3), k=k)
    dist = np.asarray(dist).reshape(-1, k)
    idx = np.asarray(idx).reshape(-1, k)
    if single:
        return idx[0], dist[0]
    return idx, dist


def nearest_distances(a, b) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest point in ``b``."""
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise GeometryError("empty cloud")
    return cKDTree(pb).query(pa, k=1)[0]


def chamfer_distance(a, b) -> float:
    """Symmetric Chamfer distance: mean NN distance a->b plus mean NN distance b->a."""
    return float(nearest_distances(a, b).mean() + nearest_distances(b, a).mean())


# --------------------------------------------------------------------------
# sampling and normals


def sample_mesh_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform surface samples carrying the normal of their face."""
    areas = mesh.face_areas
    total = areas.sum()
    if len(areas) == 0 or total <= 0:
        raise DegenerateModelError("mesh has no face with positive area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.faces[face]]
    pts = (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]
    return PointCloud(pts, mesh.face_normals[face])


def estimate_normals(cloud: PointCloud, k: int = 10, viewpoint=(0.0, 0.0, 0.0), return_confidence=False):
    """PCA normals over the k-neighbourhood, oriented toward ``viewpoint``.

    Neighbourhoods whose covariance has rank < 2 get the normal (0, 0, 1) and are
    reported as low-confidence when ``return_confidence`` is set.
    """
    pts = cloud.points
    if len(pts) < k or k < 3:
        raise GeometryError(f"need at least k={max(k, 3)} points")
    idx, _ = knn(pts, pts, k)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    w, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0].copy()
    scale = np.maximum(w[:, 2], 1e-300)
    degenerate = w[:, 1] / scale < 1e-10
    normals[degenerate] = (0.0, 0.0, 1.0)
    view = np.asarray(viewpoint, dtype=float) - pts
    flip = np.einsum("ij,ij->i", normals, view) < 0
    normals[flip & ~degenerate] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    out = PointCloud(pts, normals, cloud.labels)
    if return_confidence:
        return out, ~degenerate
    return out


# --------------------------------------------------------------------------
# object models and normalization


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """Canonical mesh with its sampled target cloud and normalization constants."""

    mesh: TriangleMesh
    target_cloud: PointCloud
    centroid: np.ndarray
    scale: float
    diameter: float
    symmetry: object
    com: np.ndarray
    class_id: int = 0
    name: str = ""

    @classmethod
    def from_mesh(cls, mesh, symmetry=None, n_points=1024, seed=0, class_id=0, com=None, name=""):
        from .symmetry import SymmetryClass

        cloud = sample_mesh_surface(mesh, n_points, seed)
        mu, d_y = target_normalization(cloud.points)
        if com is None:
            com = mesh.volume_centroid()
        return cls(
            mesh=mesh,
            target_cloud=cloud,
            centroid=mu,
            scale=d_y,
            diameter=mesh_diameter(mesh),
            symmetry=symmetry if symmetry is not None else SymmetryClass("none"),
            com=np.asarray(com, dtype=float),
            class_id=class_id,
            name=name,
        )

    def __post_init__(self):
        if not self.scale > 0 or not self.diameter > 0:
            raise DegenerateModelError("model scale and diameter must be positive")


def target_normalization(points):
    """Centroid and maximal centroid distance of a target cloud."""
    pts = _as_points(points)
    mu = pts.mean(axis=0)
    d_y = float(np.linalg.norm(pts - mu, axis=1).max())
    return mu, d_y


def mesh_diameter(mesh: TriangleMesh) -> float:
    v = mesh.vertices
    if len(v) > 2000:
        from scipy.spatial import ConvexHull

        v = v[ConvexHull(v).vertices]
    diff = v[:, None, :] - v[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max())


def normalize_points(points, centroid, scale) -> np.ndarray:
    if not scale > 0:
        raise DegenerateModelError("normalization scale must be positive")
    return (np.asarray(points, dtype=float) - centroid) / scale


def denormalize_points(points, centroid, scale) -> np.ndarray:
    return np.asarray(points, dtype=float) * scale + centroid


def normalize_pair(source: PointCloud, model: ObjectModel):
    """Shift both clouds by the target centroid and scale by the target radius.

    ``source`` is expected in the model frame already; normals are left unchanged.
    """
    if not model.scale > 0:
        raise DegenerateModelError("d_Y is zero")
    src = PointCloud(normalize_points(source.points, model.centroid, model.scale), source.normals, source.labels)
    tgt_cloud = model.target_cloud
    tgt = PointCloud(
        normalize_points(tgt_cloud.points, model.centroid, model.scale), tgt_cloud.normals, tgt_cloud.labels
    )
    return src, tgt
