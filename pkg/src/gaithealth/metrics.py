"""Pose and health-indicator metrics.

Joint-space metrics take inputs in meters and report millimeters.
MPJPE aligns roots (joint 0) before measuring; PA-MPJPE instead applies
the least-squares similarity transform with a proper rotation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MM = 1000.0


class DegenerateInputError(ValueError):
    pass


def bmi(weight, height, imperial: bool = False):
    """weight/height**2 (kg, m), or weight*703/height**2 for (lb, in)."""
    weight = np.asarray(weight, dtype=np.float64)
    height = np.asarray(height, dtype=np.float64)
    if (weight <= 0).any() or (height <= 0).any():
        raise ValueError("weight and height must be positive")
    out = weight * (703.0 if imperial else 1.0) / height ** 2
    return float(out) if out.ndim == 0 else out


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def mpjpe(pred, gt, root: int = 0) -> float:
    pred, gt = _check_pair(pred, gt)
    if root is not None:
        pred = pred - pred[..., root:root + 1, :]
        gt = gt - gt[..., root:root + 1, :]
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * MM)


def similarity_transform(pred, gt):
    """Return (scale, R, t) minimizing sum ||s R pred_i + t - gt_i||^2 with det(R) = +1."""
    pred, gt = _check_pair(pred, gt)
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    x, y = pred - mu_p, gt - mu_g
    var_p = (x ** 2).sum()
    if var_p < 1e-18:
        raise DegenerateInputError("prediction points coincide")
    u, sig, vt = np.linalg.svd(y.T @ x)
    d = np.ones(len(sig))
    d[-1] = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = u @ np.diag(d) @ vt
    scale = (sig * d).sum() / var_p
    trans = mu_g - scale * rot @ mu_p
    return scale, rot, trans


def procrustes_align(pred, gt) -> np.ndarray:
    scale, rot, trans = similarity_transform(pred, gt)
    return scale * np.asarray(pred, dtype=np.float64) @ rot.T + trans


def pa_mpjpe(pred, gt) -> float:
    return mpjpe(procrustes_align(pred, gt), gt, root=None)


def pve(pred_points, gt_points) -> float:
    pred, gt = _check_pair(pred_points, gt_points)
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * MM)


def _bone_lengths(joints, parents):
    joints = np.asarray(joints, dtype=np.float64)
    child = [i for i, p in enumerate(parents) if p >= 0]
    par = [p for p in parents if p >= 0]
    return np.linalg.norm(joints[..., child, :] - joints[..., par, :], axis=-1)


def limblen_error_frames(pred, gt, parents) -> np.ndarray:
    """Per-frame |total limb length(pred) - total limb length(gt)| in mm."""
    pred, gt = _check_pair(pred, gt)
    return np.abs(_bone_lengths(pred, parents).sum(-1) - _bone_lengths(gt, parents).sum(-1)) * MM


def limblen_error(pred, gt, parents) -> float:
    """Mean over frames of the total-limb-length difference, mm. Accepts (J,3) or (T,J,3)."""
    return float(np.mean(limblen_error_frames(pred, gt, parents)))


def limblen_error_per_bone(pred, gt, parents) -> float:
    """Mean over frames of sum_b |len_b(pred) - len_b(gt)|, mm (reported alongside)."""
    pred, gt = _check_pair(pred, gt)
    diff = np.abs(_bone_lengths(pred, parents) - _bone_lengths(gt, parents)).sum(-1)
    return float(np.mean(diff) * MM)


def mae(preds, gts) -> float:
    preds, gts = _check_pair(preds, gts)
    return float(np.abs(preds - gts).mean())


def mape(preds, gts) -> float:
    preds, gts = _check_pair(preds, gts)
    if (gts <= 0).any():
        raise ValueError("MAPE needs positive ground truth")
    return float((np.abs(preds - gts) / gts).mean() * 100.0)


def format_error(mae_value: float, mape_value: float) -> str:
    """Table cell in the "2.29 / 9.86%" style."""
    return f"{mae_value:.2f} / {mape_value:.2f}%"


POSE_KEYS = ("mpjpe", "pa_mpjpe", "pve", "limblen_error")


@dataclass
class MetricReport:
    per_sequence: dict = field(default_factory=dict)
    per_frame: dict = field(default_factory=dict)
    indicator_errors: dict = field(default_factory=dict)

    def add_sequence(self, seq_id, pred_joints, gt_joints, pred_points, gt_points, parents):
        """Accumulate pose metrics for one (T, J, 3) sequence."""
        pred_joints = np.asarray(pred_joints, dtype=np.float64)
        gt_joints = np.asarray(gt_joints, dtype=np.float64)
        frame_mpjpe = np.array([mpjpe(p, g) for p, g in zip(pred_joints, gt_joints)])
        frame_limb = limblen_error_frames(pred_joints, gt_joints, parents)
        self.per_sequence[seq_id] = {
            "mpjpe": float(frame_mpjpe.mean()),
            "pa_mpjpe": float(np.mean([pa_mpjpe(p, g) for p, g in zip(pred_joints, gt_joints)])),
            "pve": pve(pred_points, gt_points),
            "limblen_error": float(frame_limb.mean()),
            "limblen_error_per_bone": limblen_error_per_bone(pred_joints, gt_joints, parents),
        }
        self.per_frame[seq_id] = {"mpjpe": frame_mpjpe.tolist(), "limblen_error": frame_limb.tolist()}

    def add_indicator(self, name, preds, gts):
        self.indicator_errors[name] = {"mae": mae(preds, gts), "mape": mape(preds, gts)}

    @property
    def aggregate(self) -> dict:
        if not self.per_sequence:
            return {}
        keys = next(iter(self.per_sequence.values())).keys()
        return {k: float(np.mean([v[k] for v in self.per_sequence.values()])) for k in keys}

    def to_dict(self) -> dict:
        return {
            "per_sequence": self.per_sequence,
            "per_frame": self.per_frame,
            "aggregate": self.aggregate,
            "indicator_errors": self.indicator_errors,
        }

    @classmethod
    def from_dict(cls, d) -> "MetricReport":
        return cls(d.get("per_sequence", {}), d.get("per_frame", {}), d.get("indicator_errors", {}))

    def write_json(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_frame_csv(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sequence", "frame", "mpjpe_mm", "limblen_error_mm"])
            for seq_id, series in self.per_frame.items():
                for t, (m, l) in enumerate(zip(series["mpjpe"], series["limblen_error"])):
                    w.writerow([seq_id, t, repr(m), repr(l)])
