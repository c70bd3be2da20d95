"""Evaluation metrics for fitted grasps."""

from __future__ import annotations

import numpy as np

from .errors import TooFewGrasps
from .grasp_data import GraspRecord


def diversity_metric(grasps: list[GraspRecord]) -> tuple[np.ndarray, float]:
    """Population standard deviation of each joint angle across grasps of one gripper.

    Returns the per-joint std and its mean across joints.
    """
    if len(grasps) < 2:
        raise TooFewGrasps(f"diversity needs at least 2 grasps, got {len(grasps)}")
    gripper = grasps[0].gripper_id
    dof = grasps[0].dof
    for g in grasps:
        if g.gripper_id != gripper or g.dof != dof:
            raise ValueError("diversity is defined over grasps of a single gripper")
    angles = np.stack([g.joint_angles for g in grasps])
    per_joint = angles.std(axis=0, ddof=0)
    return per_joint, float(per_joint.mean()) if dof else 0.0


def rms_residual(residuals) -> float:
    """Root mean square over a list of per-grasp RMS keypoint residuals."""
    r = np.asarray(residuals, dtype=np.float64)
    return float(np.sqrt(np.mean(r**2)))
