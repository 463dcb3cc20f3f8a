"""Canonical-frame symmetry groups and closest-equivalent ground-truth selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, axis_rotation, rotation_angle

VARIANTS = ("none", "cylindrical", "cuboid", "box", "front_back", "rotational")
CONTINUOUS = ("cylindrical", "rotational")
DEFAULT_RESOLUTION_DEG = 5.0


@dataclass(frozen=True)
class SymmetryClass:
    variant: str = "none"
    resolution_deg: float = DEFAULT_RESOLUTION_DEG

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown symmetry variant {self.variant!r}; expected one of {VARIANTS}")
        if self.continuous:
            if not self.resolution_deg > 0 or abs(360.0 / self.resolution_deg % 1.0 - 0.5) < 0.5 - 1e-9:
                raise ValueError("resolution_deg must be positive and divide 360")

    @property
    def continuous(self) -> bool:
        return self.variant in CONTINUOUS

    def to_dict(self) -> dict:
        d = {"symmetry": self.variant}
        if self.continuous:
            d["resolution_deg"] = self.resolution_deg
        return d

    @classmethod
    def from_dict(cls, d) -> SymmetryClass:
        return cls(d.get("symmetry", "none"), float(d.get("resolution_deg", DEFAULT_RESOLUTION_DEG)))


def _z_turns(n):
    return [axis_rotation("z", 2 * np.pi * k / n) for k in range(n)]


def enumerate_symmetries(cls: SymmetryClass) -> np.ndarray:
    """Rotation set of a symmetry class as an ``(m, 3, 3)`` array, identity first.

    Products are ordered with the z-turns varying fastest within each flip.
    """
    flip = [np.eye(3), axis_rotation("x", np.pi)]
    v = cls.variant
    if v == "none":
        rots = [np.eye(3)]
    elif v == "front_back":
        rots = _z_turns(2)
    elif v == "box":
        rots = [f @ z for f in flip for z in _z_turns(2)]
    elif v == "cuboid":
        rots = [f @ z for f in flip for z in _z_turns(4)]
    else:
        n = int(round(360.0 / cls.resolution_deg))
        turns = _z_turns(n)
        rots = turns if v == "rotational" else [f @ z for f in flip for z in turns]
    out = np.array(rots)
    out[0] = np.eye(3)
    # snap round-off so that e.g. Rz(pi) is exactly integral
    out[np.abs(out) < 1e-15] = 0.0
    return out


def closest_symmetric_pose(gt: RigidTransform, estimate: RigidTransform, syms):
    """Index and pose of the symmetric ground truth closest to ``estimate``.

    Candidates are ``R @ S`` for each symmetry rotation ``S``; the winner maximizes
    ``trace(R_s @ R_est.T)``, ties going to the lowest index. Translation is kept.
    """
    syms = np.asarray(syms, dtype=float).reshape(-1, 3, 3)
    cand = gt.rotation @ syms
    traces = np.einsum("nij,ij->n", cand, estimate.rotation)
    best = traces.max()
    idx = int(np.flatnonzero(traces >= best - 1e-12)[0])
    return idx, RigidTransform(cand[idx], gt.translation)


def symmetric_residual_angle(gt: RigidTransform, estimate: RigidTransform, syms) -> float:
    """Smallest residual rotation angle over the symmetric ground-truth set."""
    _, pose = closest_symmetric_pose(gt, estimate, syms)
    return rotation_angle(pose.rotation @ estimate.rotation.T)
