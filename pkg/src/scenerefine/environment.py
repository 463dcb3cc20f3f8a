"""Discrete-action refinement environment, expert and greedy policies, rollouts."""

from __future__ import annotations

import base64
import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform, chamfer_distance, matrix_to_rotvec, rotvec_to_matrix
from .plausibility import (
    EPSILON,
    INSIDE_COSINE,
    KNN_K,
    QUORUM,
    ObjectPlausibility,
    PlaneFrameScene,
    SceneState,
    object_plausibility,
    surface_distance,
    to_plane_frame,
)
from .scoring import CameraIntrinsics, ScoreConfig, render, score_pose
from .symmetry import closest_symmetric_pose, enumerate_symmetries

STEP_SIZES = (0.0033, 0.01, 0.03, 0.09, 0.27)
RHO = (0.6, 0.1, 0.5)
RHO_P = 0.5
ITERATIONS = 10
IL_SCHEMA = "scenerefine.il"
IL_VERSION = 1


class RefinementError(RuntimeError):
    pass


class StaleDistanceError(RefinementError):
    pass


class EmptyForegroundError(RefinementError):
    pass


@dataclass(frozen=True)
class ActionSpace:
    """Per-axis step magnitudes; a signed index ``i`` means ``sign(i) * steps[|i| - 1]``."""

    steps: tuple = STEP_SIZES

    def __post_init__(self):
        s = tuple(float(x) for x in self.steps)
        if not s or s[0] <= 0 or any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError("step sizes must be positive and strictly increasing")
        object.__setattr__(self, "steps", s)

    @property
    def magnitudes(self) -> tuple:
        return (0.0,) + self.steps

    @property
    def max_index(self) -> int:
        return len(self.steps)

    def value(self, index: int) -> float:
        if abs(index) > self.max_index:
            raise ValueError(f"step index {index} out of range")
        return float(np.sign(index)) * self.magnitudes[abs(index)]

    def values(self, indices) -> np.ndarray:
        return np.array([self.value(int(i)) for i in indices])

    def floor_index(self, residual: float) -> int:
        """Signed index of the largest step not exceeding ``|residual|`` (0 if none)."""
        mag = abs(residual)
        idx = int(np.searchsorted(self.steps, mag * (1 + 1e-12), side="right"))
        return idx if residual >= 0 else -idx


@dataclass(frozen=True)
class Action:
    rot: tuple = (0, 0, 0)
    trans: tuple = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "rot", tuple(int(x) for x in self.rot))
        object.__setattr__(self, "trans", tuple(int(x) for x in self.trans))
        if len(self.rot) != 3 or len(self.trans) != 3:
            raise ValueError("actions have three rotation and three translation indices")

    @property
    def is_stop(self) -> bool:
        return not any(self.rot) and not any(self.trans)

    def negated(self) -> Action:
        return Action(tuple(-i for i in self.rot), tuple(-i for i in self.trans))

    def indices(self) -> list:
        return list(self.rot) + list(self.trans)

    def validate(self, space: ActionSpace) -> None:
        if any(abs(i) > space.max_index for i in self.indices()):
            raise ValueError("action index outside the action space")


STOP = Action()


def apply_action(estimate: RigidTransform, action: Action, space: ActionSpace = ActionSpace(),
                 scale: float = 1.0) -> RigidTransform:
    """Disentangled update: left-multiply the rotation, add the translation step.

    Rotation steps (radians) form a rotation vector about the camera axes, applied
    about the model origin. Translation steps are in normalized units and are
    multiplied by ``scale`` (the target radius) before being added.
    """
    action.validate(space)
    rv = space.values(action.rot)
    dt = space.values(action.trans) * scale
    rot = estimate.rotation if not rv.any() else rotvec_to_matrix(rv) @ estimate.rotation
    return RigidTransform(rot, estimate.translation + dt)


def pose_residual(gt: RigidTransform, estimate: RigidTransform, scale: float = 1.0):
    """Rotation-vector residual of ``gt.R @ est.R.T`` and the translation residual in normalized units."""
    return matrix_to_rotvec(gt.rotation @ estimate.rotation.T), (gt.translation - estimate.translation) / scale


def expert_action(gt: RigidTransform, estimate: RigidTransform, syms=None, space: ActionSpace = ActionSpace(),
                  scale: float = 1.0) -> Action:
    """Largest non-overshooting step per axis toward the closest symmetric ground truth."""
    if syms is not None:
        _, gt = closest_symmetric_pose(gt, estimate, syms)
    drot, dtrans = pose_residual(gt, estimate, scale)
    return Action(tuple(space.floor_index(r) for r in drot), tuple(space.floor_index(t) for t in dtrans))


def alignment_reward(prev_cd: float, next_cd: float, rho=RHO, tol: float = 1e-12) -> float:
    """``rho`` is ``(worse, stagnant, better)`` magnitudes; worsening and stagnation are penalized."""
    worse, same, better = rho
    if abs(next_cd - prev_cd) <= tol:
        return -same
    return -worse if next_cd > prev_cd else better


def plausibility_reward(verdict, rho_p: float = RHO_P) -> float:
    return rho_p if verdict.stable else -rho_p


@dataclass(frozen=True)
class EnvConfig:
    steps: tuple = STEP_SIZES
    rho: tuple = RHO
    rho_p: float = RHO_P
    epsilon: float = EPSILON
    knn_k: int = KNN_K
    quorum: float = QUORUM
    inside_cosine: float = INSIDE_COSINE
    iterations: int = ITERATIONS
    tau_d: float = 0.02
    tau_n: float = 0.7
    greedy_cost: str = "visible"
    greedy_points: int = 256

    @property
    def space(self) -> ActionSpace:
        return ActionSpace(self.steps)

    @property
    def score(self) -> ScoreConfig:
        return ScoreConfig(self.tau_d, self.tau_n)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> EnvConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        kw = dict(d)
        for key in ("steps", "rho"):
            if key in kw:
                kw[key] = tuple(float(x) for x in kw[key])
        return cls(**kw)


# --------------------------------------------------------------------------
# scene distances and observations


@dataclass
class SceneDistances:
    """Surface distances for every source and target cloud, tied to one set of estimates."""

    key: bytes
    plane_scene: PlaneFrameScene
    source_distance: list
    plausibility: list

    @property
    def verdicts(self):
        return [p.verdict for p in self.plausibility]


def compute_scene_distances(scene: SceneState, cfg: EnvConfig = EnvConfig()) -> SceneDistances:
    pf = to_plane_frame(scene)
    src, pl = [], []
    for i in range(len(scene.objects)):
        src.append(surface_distance(pf.sources[i], pf, exclude=i, k=cfg.knn_k, quorum=cfg.quorum,
                                      min_cos=cfg.inside_cosine).distance)
        pl.append(object_plausibility(pf, i, cfg.epsilon, cfg.knn_k, cfg.quorum, cfg.inside_cosine))
    return SceneDistances(pf.key, pf, src, pl)


@dataclass(frozen=True)
class Observation:
    """Normalized per-point rows: ``x y z nx ny nz d`` (d scaled by the target radius)."""

    source: np.ndarray
    target: np.ndarray
    foreground: np.ndarray
    class_id: int
    num_classes: int

    @property
    def class_onehot(self) -> np.ndarray:
        v = np.zeros(self.num_classes)
        v[self.class_id] = 1.0
        return v

    def summary(self) -> dict:
        """Pooled statistics over foreground source rows and all target rows."""
        src = self.source[self.foreground]
        return {
            "n_source": int(len(src)),
            "n_target": int(len(self.target)),
            "source_mean_distance": float(src[:, 6].mean()),
            "target_mean_distance": float(self.target[:, 6].mean()),
            "target_min_distance": float(self.target[:, 6].min()),
        }


def _foreground(source) -> np.ndarray:
    if source.labels is None:
        return np.ones(len(source), dtype=bool)
    return np.asarray(source.labels) > 0


def build_observation(scene: SceneState, index: int, distances: SceneDistances,
                      num_classes: Optional[int] = None) -> Observation:
    if distances.key != scene.estimates_key():
        raise StaleDistanceError("surface distances were computed for different estimates")
    obj = scene.objects[index]
    model = obj.model
    fg = _foreground(obj.source)
    if not fg.any():
        raise EmptyForegroundError("every source point is labeled as outlier")
    inv = obj.estimate.inverse()
    mu, s = model.centroid, model.scale
    src_pts = (inv.apply(obj.source.points) - mu) / s
    if obj.source.normals is not None:
        src_n = inv.apply_vectors(obj.source.normals)
    else:
        src_n = np.zeros_like(src_pts)
    tgt = model.target_cloud
    tgt_pts = (tgt.points - mu) / s
    src_rows = np.column_stack([src_pts, src_n, distances.source_distance[index] / s])
    tgt_rows = np.column_stack([tgt_pts, tgt.normals, distances.plausibility[index].field.distance / s])
    if num_classes is None:
        num_classes = max(o.model.class_id for o in scene.objects) + 1
    return Observation(src_rows, tgt_rows, fg, int(model.class_id), int(num_classes))


# --------------------------------------------------------------------------
# greedy GT-free policy


def _visible_mask(model, estimate: RigidTransform) -> np.ndarray:
    pts = estimate.apply(model.target_cloud.points)
    nrm = estimate.apply_vectors(model.target_cloud.normals)
    return np.einsum("ij,ij->i", nrm, -pts) > 0


class _ChamferCost:
    """Chamfer distance between the fixed source and the target under candidate poses."""

    def __init__(self, source_pts, target_pts):
        self.src = source_pts
        self.tgt = target_pts
        self.src_tree = cKDTree(source_pts)
        self.tgt_tree = cKDTree(target_pts)

    def __call__(self, pose: RigidTransform) -> float:
        inv = pose.inverse()
        a = self.tgt_tree.query(inv.apply(self.src), k=1)[0].mean()
        b = self.src_tree.query(pose.apply(self.tgt), k=1)[0].mean()
        return float(a + b)


def _thin(points, max_points):
    if max_points is None or len(points) <= max_points:
        return points
    return points[np.linspace(0, len(points) - 1, max_points).round().astype(int)]


def greedy_action(scene: SceneState, index: int, space: ActionSpace = ActionSpace(),
                  cost: str = "visible", max_points: Optional[int] = 256) -> Action:
    """Per-axis one-step lookahead minimizing the Chamfer distance; ties keep the stop action.

    ``cost="chamfer"`` compares against the whole target cloud; ``"visible"`` only
    against target points facing the camera under the current estimate. Both clouds
    are thinned to ``max_points`` evenly strided rows.
    """
    obj = scene.objects[index]
    fg = _foreground(obj.source)
    src = obj.source.points[fg]
    if len(src) == 0:
        raise EmptyForegroundError("every source point is labeled as outlier")
    src = _thin(src, max_points)
    tgt = obj.model.target_cloud.points
    if cost == "visible":
        vis = _visible_mask(obj.model, obj.estimate)
        if vis.sum() >= 3:
            tgt = tgt[vis]
    elif cost != "chamfer":
        raise ValueError(f"unknown greedy cost {cost!r}")
    tgt = _thin(tgt, max_points)
    fn = _ChamferCost(src, tgt)
    base = fn(obj.estimate)
    scale = obj.model.scale
    choice = [0] * 6
    for axis in range(6):
        best, best_i = base, 0
        for i in range(-space.max_index, space.max_index + 1):
            if i == 0:
                continue
            idx = [0] * 6
            idx[axis] = i
            c = fn(apply_action(obj.estimate, Action(idx[:3], idx[3:]), space, scale))
            if c < best - 1e-12:
                best, best_i = c, i
        choice[axis] = best_i
    return Action(choice[:3], choice[3:])


# --------------------------------------------------------------------------
# rollouts


@dataclass
class StepRecord:
    iteration: int
    action: Action
    pose: RigidTransform
    alignment_reward: Optional[float] = None
    plausibility_reward: Optional[float] = None
    cd: Optional[float] = None
    score: Optional[float] = None
    verdict: Optional[dict] = None
    summary: dict = field(default_factory=dict)
    expert_action: Optional[Action] = None
    observation: Optional[Observation] = None


@dataclass
class Trajectory:
    object_index: int
    object_id: int
    init_pose: RigidTransform
    gt_pose: Optional[RigidTransform] = None
    init_score: Optional[float] = None
    records: list = field(default_factory=list)

    def poses(self) -> list:
        return [self.init_pose] + [r.pose for r in self.records]

    def scores(self) -> list:
        return [self.init_score] + [r.score for r in self.records]

    def best(self):
        """Index and pose with the highest recorded score (ties go to the latest)."""
        scores = self.scores()
        if any(s is None for s in scores):
            raise ValueError("trajectory was rolled out without scoring")
        top = max(scores)
        idx = max(i for i, s in enumerate(scores) if s == top)
        return idx, self.poses()[idx]

    def __len__(self):
        return len(self.records)


PolicyFn = Callable[[Observation, SceneState, int], Action]


@dataclass
class ScoringContext:
    """Observed images and per-object masks used to score every pose of a rollout."""

    cam: CameraIntrinsics
    depth: np.ndarray
    normals: np.ndarray
    masks: Sequence[np.ndarray]


def _source_cd(obj, pose, gt_s) -> float:
    pts = obj.source.points[_foreground(obj.source)]
    return chamfer_distance(pose.inverse().apply(pts), gt_s.inverse().apply(pts))


def refine_scene(scene: SceneState, policy: Union[str, PolicyFn] = "expert", iterations: Optional[int] = None,
                 cfg: EnvConfig = EnvConfig(), scoring: Optional[ScoringContext] = None,
                 keep_observations: bool = False) -> list:
    """Refine all objects of a scene in lock-step; one trajectory per object.

    Every iteration recomputes the plane-frame scene and its surface distances once,
    selects one action per object from the same snapshot, then applies all updates.
    Rewards require ground-truth poses on the scene objects.
    """
    if not scene.objects:
        raise RefinementError("empty scene")
    iterations = cfg.iterations if iterations is None else iterations
    space = cfg.space
    syms = [enumerate_symmetries(o.model.symmetry) for o in scene.objects]
    num_classes = max(o.model.class_id for o in scene.objects) + 1

    if isinstance(policy, str):
        if policy not in ("expert", "greedy"):
            raise ValueError(f"unknown policy {policy!r}")
        if policy == "expert" and any(o.gt is None for o in scene.objects):
            raise RefinementError("expert policy needs ground-truth poses")

    def score(i, pose):
        if scoring is None:
            return None
        rendered = render(scene.objects[i].model.mesh, pose, scoring.cam)
        return score_pose(rendered, (scoring.depth, scoring.normals), scoring.masks[i], cfg.score)

    trajs = [
        Trajectory(i, o.object_id, o.estimate, o.gt, score(i, o.estimate)) for i, o in enumerate(scene.objects)
    ]
    state = scene
    dist = compute_scene_distances(state, cfg)
    for it in range(iterations):
        actions, experts, observations = [], [], []
        for i, o in enumerate(state.objects):
            obs = build_observation(state, i, dist, num_classes) if (keep_observations or callable(policy)) else None
            exp = None
            if o.gt is not None:
                exp = expert_action(o.gt, o.estimate, syms[i], space, o.model.scale)
            if policy == "expert":
                act = exp
            elif policy == "greedy":
                act = greedy_action(state, i, space, cfg.greedy_cost, cfg.greedy_points)
            else:
                act = policy(obs, state, i)
            actions.append(act)
            experts.append(exp)
            observations.append(obs)

        new_est = [apply_action(o.estimate, a, space, o.model.scale) for o, a in zip(state.objects, actions)]
        new_state = state.with_estimates(new_est)
        new_dist = compute_scene_distances(new_state, cfg)
        for i, o in enumerate(state.objects):
            verdict = new_dist.plausibility[i].verdict
            rec = StepRecord(
                iteration=it + 1,
                action=actions[i],
                pose=new_est[i],
                plausibility_reward=plausibility_reward(verdict, cfg.rho_p),
                score=score(i, new_est[i]),
                verdict=verdict.to_dict(),
                expert_action=experts[i],
                observation=observations[i] if keep_observations else None,
            )
            if o.gt is not None:
                _, gt_s = closest_symmetric_pose(o.gt, o.estimate, syms[i])
                before = _source_cd(o, o.estimate, gt_s)
                after = _source_cd(o, new_est[i], gt_s)
                rec.cd = after
                rec.alignment_reward = alignment_reward(before, after, cfg.rho)
            if observations[i] is not None:
                rec.summary = observations[i].summary()
            trajs[i].records.append(rec)
        state, dist = new_state, new_dist
    return trajs


# --------------------------------------------------------------------------
# trajectory dumps and IL datasets

CSV_FIELDS = [
    "iteration", "object", "rot_x", "rot_y", "rot_z", "trans_x", "trans_y", "trans_z", "cd",
    "alignment_reward", "plausibility_reward", "intersecting", "floating", "feasible", "stable", "score",
]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def write_trajectory_csv(trajectories, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for t in trajectories:
            for r in t.records:
                v = r.verdict or {}
                w.writerow([_fmt(x) for x in [
                    r.iteration, t.object_id, *r.action.rot, *r.action.trans, r.cd, r.alignment_reward,
                    r.plausibility_reward, v.get("intersecting"), v.get("floating"), v.get("feasible"),
                    v.get("stable"), r.score,
                ]])


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    return {"dtype": a.dtype.str, "shape": list(a.shape), "b64": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["b64"]), dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def il_records(trajectories, episode_offset: int = 0) -> list:
    """Flatten trajectories into IL records; each must carry observations and expert labels."""
    out = []
    for e, t in enumerate(trajectories):
        for r in t.records:
            if r.observation is None or r.expert_action is None:
                raise RefinementError("records need observations and expert actions for IL export")
            out.append({
                "episode": episode_offset + e,
                "object_id": int(t.object_id),
                "iteration": int(r.iteration),
                "class_id": int(r.observation.class_id),
                "num_classes": int(r.observation.num_classes),
                "source": r.observation.source.astype(np.float32),
                "target": r.observation.target.astype(np.float32),
                "foreground": r.observation.foreground,
                "expert_action": {"rot": list(r.expert_action.rot), "trans": list(r.expert_action.trans)},
                "action": {"rot": list(r.action.rot), "trans": list(r.action.trans)},
                "rewards": {"alignment": r.alignment_reward, "plausibility": r.plausibility_reward},
            })
    return out


def export_il_dataset(records, path, step_sizes=STEP_SIZES, meta: Optional[dict] = None) -> None:
    """JSON-lines file: a header line, then one line per record with base64 arrays."""
    if not records:
        raise RefinementError("nothing to export")
    header = {"schema": IL_SCHEMA, "version": IL_VERSION, "step_sizes": list(step_sizes),
              "records": len(records), "meta": meta or {}}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            row = {k: (_encode(v) if isinstance(v, np.ndarray) else v) for k, v in rec.items()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_il_dataset(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != IL_SCHEMA:
            raise ValueError(f"{path}: not an IL dataset")
        if header.get("version") != IL_VERSION:
            raise ValueError(f"{path}: unsupported IL schema version {header.get('version')}")
        records = []
        for line in fh:
            row = json.loads(line)
            records.append({k: (_decode(v) if isinstance(v, dict) and "b64" in v else v) for k, v in row.items()})
    return header, records
