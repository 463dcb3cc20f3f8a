"""Scene-level physical plausibility from point-based surface distances.

All scene geometry is evaluated in the plane frame: origin on the support plane,
z along its outward normal, gravity along -z unless overridden.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ObjectModel, PointCloud, RigidTransform

EPSILON = 0.01
KNN_K = 5
QUORUM = 0.6
INSIDE_COSINE = 0.3
RANSAC_ITERATIONS = 256
RANSAC_THRESHOLD = 0.005
HULL_TOL = 1e-9


class PlausibilityError(ValueError):
    pass


@dataclass(frozen=True)
class PlaneModel:
    """Support plane; ``pose`` maps plane-frame coordinates into the camera frame."""

    pose: RigidTransform
    inlier_count: int = 0

    @property
    def normal(self) -> np.ndarray:
        return self.pose.rotation[:, 2]

    @property
    def camera_to_plane(self) -> RigidTransform:
        return self.pose.inverse()

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "inlier_count": int(self.inlier_count)}

    @classmethod
    def from_dict(cls, d) -> PlaneModel:
        return cls(RigidTransform.from_dict(d["pose"]), int(d.get("inlier_count", 0)))


def frame_from_normal(normal, origin, reference=(1.0, 0.0, 0.0)) -> RigidTransform:
    """Right-handed frame with z along ``normal`` and x as close as possible to ``reference``."""
    z = np.asarray(normal, dtype=float)
    z = z / np.linalg.norm(z)
    ref = np.asarray(reference, dtype=float)
    if abs(ref @ z) > 0.9:
        ref = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([0.0, 0.0, 1.0])
    x = ref - (ref @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), origin)


def fit_plane_ransac(
    background: PointCloud | np.ndarray,
    iterations: int = RANSAC_ITERATIONS,
    inlier_threshold: float = RANSAC_THRESHOLD,
    seed: int = 0,
) -> PlaneModel:
    """RANSAC plane with least-squares refit; the normal faces the camera origin."""
    pts = background.points if isinstance(background, PointCloud) else np.asarray(background, float)
    if len(pts) < 3:
        raise PlausibilityError("need at least 3 background points")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise PlausibilityError("background points are collinear")

    rng = np.random.default_rng(seed)
    best_count, best_mask = -1, None
    for _ in range(iterations):
        a, b, c = pts[rng.choice(len(pts), 3, replace=False)]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n /= norm
        mask = np.abs((pts - a) @ n) < inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None:
        raise PlausibilityError("no non-degenerate sample found")

    inl = pts[best_mask]
    centroid = inl.mean(axis=0)
    normal = np.linalg.svd(inl - centroid, full_matrices=False)[2][-1]
    if normal @ (-centroid) < 0:
        normal = -normal
    final = np.abs((pts - centroid) @ normal) < inlier_threshold
    return PlaneModel(frame_from_normal(normal, centroid), int(final.sum()))


@dataclass
class SceneObject:
    model: ObjectModel
    source: PointCloud
    estimate: RigidTransform
    gt: Optional[RigidTransform] = None
    object_id: int = 0


@dataclass
class SceneState:
    """Support plane plus objects with observed sources (camera frame) and pose estimates.

    Poses map model coordinates into the camera frame.
    """

    plane: Optional[PlaneModel]
    objects: list = field(default_factory=list)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))

    @property
    def estimates(self):
        return [o.estimate for o in self.objects]

    def with_estimates(self, estimates: Sequence[RigidTransform]) -> SceneState:
        objs = [replace(o, estimate=e) for o, e in zip(self.objects, estimates)]
        return SceneState(self.plane, objs, self.gravity)

    def estimates_key(self) -> bytes:
        return b"".join(e.as_matrix().tobytes() for e in self.estimates) + (
            b"" if self.plane is None else self.plane.pose.as_matrix().tobytes()
        )


@dataclass
class PlaneFrameScene:
    """Scene clouds expressed in the plane frame, with a kd-tree per target."""

    sources: list
    targets: list
    coms: list
    gravity: np.ndarray
    key: bytes = b""
    trees: list = field(default_factory=list)

    def __post_init__(self):
        if not self.trees:
            self.trees = [cKDTree(t.points) for t in self.targets]


def to_plane_frame(scene: SceneState) -> PlaneFrameScene:
    """Sources mapped by the camera-to-plane transform; targets by that composed with the estimate."""
    if scene.plane is None:
        raise PlausibilityError("scene has no support plane")
    c2p = scene.plane.camera_to_plane
    sources, targets, coms = [], [], []
    for o in scene.objects:
        m2p = c2p @ o.estimate
        sources.append(o.source.transformed(c2p))
        targets.append(o.model.target_cloud.transformed(m2p))
        coms.append(m2p.apply(o.model.com))
    g = np.asarray(scene.gravity, dtype=float)
    return PlaneFrameScene(sources, targets, coms, g / np.linalg.norm(g), scene.estimates_key())


@dataclass(frozen=True)
class SurfaceDistanceField:
    distance: np.ndarray  # (n,) signed, metres
    normal: np.ndarray  # (n, 3) normal of the nearest surface point
    nearest: np.ndarray  # (n, 3) nearest surface point
    source: np.ndarray  # (n,) -1 for the plane, else object index
    neighbor_normals: np.ndarray  # (n, k, 3) normals of the k nearest samples on the winning surface

    def __len__(self):
        return len(self.distance)


def surface_distance(
    query: PointCloud | np.ndarray,
    scene: PlaneFrameScene,
    exclude: Optional[int] = None,
    k: int = KNN_K,
    quorum: float = QUORUM,
    min_cos: float = INSIDE_COSINE,
) -> SurfaceDistanceField:
    """Signed distance of plane-frame query points to the plane and all other targets.

    Object distances are nearest-sample distances, negated when at least ``quorum`` of
    the ``k`` nearest samples have normals pointing along ``y - x``. A sample votes
    inside only if the cosine between its normal and ``y - x`` exceeds ``min_cos``;
    nearly tangential samples (a query beside a face, level with its plane) would
    otherwise vote inside from far away. ``min_cos=0`` is the bare sign test. The
    plane distance is the z-coordinate. Each point keeps the minimum over all candidates.
    """
    if scene is None:
        raise PlausibilityError("scene has no support plane")
    x = query.points if isinstance(query, PointCloud) else np.asarray(query, dtype=float).reshape(-1, 3)
    n = len(x)
    if n == 0:
        raise PlausibilityError("empty query")

    up = np.array([0.0, 0.0, 1.0])
    dist = x[:, 2].copy()
    normal = np.tile(up, (n, 1))
    nearest = x.copy()
    nearest[:, 2] = 0.0
    source = np.full(n, -1, dtype=np.int64)
    nb_normals = np.tile(up, (n, k, 1))

    for j, (tgt, tree) in enumerate(zip(scene.targets, scene.trees)):
        if j == exclude:
            continue
        kk = min(k, len(tgt))
        d, idx = tree.query(x, k=kk)
        d = d.reshape(n, kk)
        idx = idx.reshape(n, kk)
        y = tgt.points[idx]
        ny = tgt.normals[idx]
        votes = np.einsum("nkc,nkc->nk", ny, y - x[:, None, :]) > min_cos * d
        inside = votes.mean(axis=1) >= quorum
        signed = np.where(inside, -d[:, 0], d[:, 0])
        better = signed < dist
        if not better.any():
            continue
        dist[better] = signed[better]
        normal[better] = ny[better, 0]
        nearest[better] = y[better, 0]
        source[better] = j
        if kk < k:
            ny = np.concatenate([ny, np.repeat(ny[:, -1:], k - kk, axis=1)], axis=1)
        nb_normals[better] = ny[better]
    return SurfaceDistanceField(dist, normal, nearest, source, nb_normals)


@dataclass(frozen=True)
class CriticalPoints:
    intersecting: np.ndarray
    contact: np.ndarray
    supported: np.ndarray


def critical_points(field: SurfaceDistanceField, g=(0.0, 0.0, -1.0), epsilon: float = EPSILON,
                    quorum: float = QUORUM) -> CriticalPoints:
    """Intersecting, contact and supported index sets.

    A contact is supported when at least ``quorum`` of the neighbouring surface normals
    oppose gravity (negative cosine with ``g``).
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    g = np.asarray(g, dtype=float)
    g = g / np.linalg.norm(g)
    d = field.distance
    inter = np.flatnonzero(d < -epsilon)
    contact_mask = np.abs(d) < epsilon
    opposing = (field.neighbor_normals @ g < 0).mean(axis=1) >= quorum
    return CriticalPoints(inter, np.flatnonzero(contact_mask), np.flatnonzero(contact_mask & opposing))


def project_along(points, g) -> np.ndarray:
    """Project plane-frame points along ``g`` onto z = 0, returning 2D coordinates."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    g = np.asarray(g, dtype=float)
    if abs(g[2]) < 1e-12:
        raise PlausibilityError("gravity is parallel to the plane")
    proj = p - (p[:, 2] / g[2])[:, None] * g
    return proj[:, :2]


def convex_hull_2d(points) -> np.ndarray:
    """Counter-clockwise hull vertices (monotone chain), collinear points dropped."""
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def point_in_convex_polygon(p, hull, tol: float = HULL_TOL) -> bool:
    p = np.asarray(p, dtype=float)
    a = hull
    b = np.roll(hull, -1, axis=0)
    e = b - a
    length = np.linalg.norm(e, axis=1)
    side = (e[:, 0] * (p[1] - a[:, 1]) - e[:, 1] * (p[0] - a[:, 0])) / length
    return bool(np.all(side >= -tol))


def stability_check(com, supported, g=(0.0, 0.0, -1.0)) -> bool:
    """True iff the CoM, projected along gravity, falls in the support polygon.

    Fewer than three non-collinear supported points never support the object.
    """
    com = np.asarray(com, dtype=float)
    if not np.all(np.isfinite(com)):
        raise PlausibilityError("non-finite centre of mass")
    sup = np.asarray(supported, dtype=float).reshape(-1, 3)
    if len(sup) < 3:
        return False
    hull = convex_hull_2d(project_along(sup, g))
    if len(hull) < 3:
        return False
    return point_in_convex_polygon(project_along(com, g)[0], hull)


@dataclass(frozen=True)
class PlausibilityVerdict:
    intersecting: bool
    floating: bool
    feasible: bool
    stable: bool

    def to_dict(self) -> dict:
        return {k: bool(getattr(self, k)) for k in ("intersecting", "floating", "feasible", "stable")}


def plausibility_verdict(cp: CriticalPoints, stability: bool) -> PlausibilityVerdict:
    intersecting = len(cp.intersecting) > 0
    floating = len(cp.contact) == 0
    feasible = not intersecting and not floating
    return PlausibilityVerdict(intersecting, floating, feasible, feasible and bool(stability))


@dataclass(frozen=True)
class ObjectPlausibility:
    field: SurfaceDistanceField
    critical: CriticalPoints
    verdict: PlausibilityVerdict


def object_plausibility(scene: PlaneFrameScene, index: int, epsilon: float = EPSILON, k: int = KNN_K,
                        quorum: float = QUORUM, min_cos: float = INSIDE_COSINE) -> ObjectPlausibility:
    """Critical points and verdict for one object's target cloud against the rest of the scene."""
    target = scene.targets[index]
    fld = surface_distance(target, scene, exclude=index, k=k, quorum=quorum, min_cos=min_cos)
    cp = critical_points(fld, scene.gravity, epsilon, quorum)
    stable = stability_check(scene.coms[index], target.points[cp.supported], scene.gravity)
    return ObjectPlausibility(fld, cp, plausibility_verdict(cp, stable))


def scene_plausibility(scene: SceneState | PlaneFrameScene, epsilon: float = EPSILON, k: int = KNN_K,
                       quorum: float = QUORUM, min_cos: float = INSIDE_COSINE) -> list:
    pf = to_plane_frame(scene) if isinstance(scene, SceneState) else scene
    return [object_plausibility(pf, i, epsilon, k, quorum, min_cos) for i in range(len(pf.targets))]


def critical_point_labels(n: int, cp: CriticalPoints) -> np.ndarray:
    """Per-point label scalar: 0 free, 1 contact, 2 supported, 3 intersecting."""
    lab = np.zeros(n)
    lab[cp.contact] = 1
    lab[cp.supported] = 2
    lab[cp.intersecting] = 3
    return lab

