"""Scene-level pose refinement with physical plausibility checks."""

from __future__ import annotations

__version__ = "0.1.0"

from .environment import Action, ActionSpace, EnvConfig, apply_action, expert_action, greedy_action, refine_scene
from .geometry import ObjectModel, PointCloud, RigidTransform, TriangleMesh, chamfer_distance
from .metrics import add_distance, adi_distance, auc, recall_at
from .plausibility import PlaneModel, SceneObject, SceneState, scene_plausibility, surface_distance
from .scoring import CameraIntrinsics, render, score_pose, select_best_pose
from .symmetry import SymmetryClass, closest_symmetric_pose, enumerate_symmetries
