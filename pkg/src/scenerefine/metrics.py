"""ADD / ADI pose errors, threshold recalls and AUC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, RigidTransform

THRESHOLDS = (0.10, 0.05, 0.02)
AUC_MAX_THRESHOLD = 0.10
AUC_BINS = 1000


def _pts(model):
    model = getattr(model, "target_cloud", model)
    p = model.points if isinstance(model, PointCloud) else np.asarray(model, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("empty model cloud")
    return p


def add_distance(model, gt: RigidTransform, est: RigidTransform) -> float:
    """Mean distance between corresponding model points under both poses."""
    m = _pts(model)
    return float(np.linalg.norm(est.apply(m) - gt.apply(m), axis=1).mean())


def adi_distance(model, gt: RigidTransform, est: RigidTransform) -> float:
    """Mean distance from each estimated model point to the closest ground-truth model point."""
    m = _pts(model)
    d, _ = cKDTree(gt.apply(m)).query(est.apply(m), k=1)
    return float(d.mean())


@dataclass(frozen=True)
class EvalRecord:
    object_class: int
    add: float
    adi: float
    diameter: float
    symmetric: bool = False
    scene: str = ""
    object_id: int = 0

    @property
    def ad(self) -> float:
        return self.adi if self.symmetric else self.add

    def error(self, metric: str = "ad") -> float:
        return {"ad": self.ad, "add": self.add, "adi": self.adi}[metric]


def evaluate_pose(model, gt, est, diameter, symmetric=False, object_class=0, **kw) -> EvalRecord:
    return EvalRecord(object_class, add_distance(model, gt, est), adi_distance(model, gt, est), diameter,
                      symmetric, **kw)


def recall_at(records, threshold_fraction: float, metric: str = "ad") -> float:
    """Fraction of records whose error is at most ``threshold_fraction`` times their diameter."""
    if not records:
        raise ValueError("no records")
    hits = [r.error(metric) <= threshold_fraction * r.diameter for r in records]
    return float(np.mean(hits))


def auc(records, max_threshold: float = AUC_MAX_THRESHOLD, bins: int = AUC_BINS, metric: str = "ad",
        relative: bool = False) -> float:
    """Area under the recall curve on ``bins`` evenly spaced thresholds in ``(0, max_threshold]``.

    With ``relative`` the thresholds are fractions of each record's diameter.
    """
    if not records:
        raise ValueError("no records")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    err = np.array([r.error(metric) for r in records])
    if relative:
        err = err / np.array([r.diameter for r in records])
    th = max_threshold * np.arange(1, bins + 1) / bins
    recall = (err[None, :] <= th[:, None]).mean(axis=1)
    return float(recall.mean())


def summarize(records, thresholds=THRESHOLDS, auc_max=AUC_MAX_THRESHOLD, bins=AUC_BINS) -> dict:
    """Per-class and mean-over-classes recalls and AUCs."""
    out = {"per_class": {}, "mean": {}}
    classes = sorted({r.object_class for r in records})
    for c in classes:
        rs = [r for r in records if r.object_class == c]
        row = {"count": len(rs)}
        for th in thresholds:
            for m in ("ad", "add", "adi"):
                row[f"{m}_recall_{th:.2f}d"] = recall_at(rs, th, m)
        for m in ("ad", "add", "adi"):
            row[f"{m}_auc"] = auc(rs, auc_max, bins, m)
        out["per_class"][str(c)] = row
    if classes:
        keys = [k for k in out["per_class"][str(classes[0])] if k != "count"]
        out["mean"] = {k: float(np.mean([out["per_class"][str(c)][k] for c in classes])) for k in keys}
        out["mean"]["count"] = len(records)
    return out
