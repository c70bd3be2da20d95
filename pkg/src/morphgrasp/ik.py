"""Fit a gripper pose (root translation, root rotation, joint angles) so that its
keypoints land on target positions.

Levenberg-Marquardt style damped least squares with a central-difference
Jacobian. Rotation updates are applied as left-multiplied axis-angle increments;
joint angles are clamped to their limits after every step, and a step is only
accepted when it lowers the squared residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergedNaN
from .grasp_data import GraspRecord, keypoint_world_positions, matrix_to_quat, quat_to_matrix
from .urdf_morph import KinematicTree, axis_angle_to_matrix, config_from_vector, make_transform

DAMPING = 1e-3
MAX_ITERS = 500
STEP_TOL = 1e-8
JAC_STEP = 1e-7


@dataclass
class IKResult:
    grasp: GraspRecord
    rms: float
    iterations: int
    history: list[float]


def _rotvec_matrix(w: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(w))
    if angle == 0.0:
        return np.eye(3)
    return axis_angle_to_matrix(w / angle, angle)


def kabsch(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid (R, t) with ``R @ source + t ~= target``."""
    cs, ct = source.mean(axis=0), target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, ct - r @ cs


def ik_fit(
    tree: KinematicTree,
    keypoint_links: list[str],
    keypoint_local: np.ndarray,
    targets: np.ndarray,
    init: GraspRecord,
    damping: float = DAMPING,
    max_iters: int = MAX_ITERS,
    step_tol: float = STEP_TOL,
) -> IKResult:
    targets = np.asarray(targets, dtype=np.float64)
    if not np.all(np.isfinite(targets)):
        raise ValueError("IK targets must be finite")
    lo, hi = tree.lower_limits(), tree.upper_limits()
    dof = tree.dof

    t = init.translation.copy()
    rot = quat_to_matrix(init.rotation)
    q = np.clip(init.joint_angles.copy(), lo, hi)

    def residual(t_, rot_, q_):
        world = keypoint_world_positions(tree, keypoint_links, keypoint_local,
                                         make_transform(t_, rot_), config_from_vector(tree, q_))
        return (world - targets).ravel()

    def apply(x):
        return t + x[:3], _rotvec_matrix(x[3:6]) @ rot, np.clip(q + x[6:], lo, hi)

    r = residual(t, rot, q)
    cost = float(r @ r)
    history = [cost]
    lam = damping
    it = 0
    for it in range(1, max_iters + 1):
        jac = np.empty((len(r), 6 + dof))
        for j in range(6 + dof):
            e = np.zeros(6 + dof)
            e[j] = JAC_STEP
            jac[:, j] = (residual(*apply(e)) - residual(*apply(-e))) / (2 * JAC_STEP)
        jtj, jtr = jac.T @ jac, jac.T @ r
        accepted = False
        while lam < 1e16:
            step = np.linalg.solve(jtj + lam * np.eye(6 + dof), -jtr)
            if not np.all(np.isfinite(step)):
                raise DivergedNaN("IK step is not finite")
            t_new, rot_new, q_new = apply(step)
            r_new = residual(t_new, rot_new, q_new)
            cost_new = float(r_new @ r_new)
            if not np.isfinite(cost_new):
                raise DivergedNaN("IK residual is not finite")
            if cost_new <= cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        t, rot, q, r = t_new, rot_new, q_new, r_new
        cost = cost_new
        history.append(cost)
        lam = max(lam * 0.1, damping)
        if np.linalg.norm(step) < step_tol:
            break

    rec = GraspRecord(init.gripper_id, init.object_id, t, matrix_to_quat(rot), q)
    rms = float(np.sqrt(cost / len(keypoint_links)))
    return IKResult(rec, rms, it, history)


def rest_grasp(tree: KinematicTree, gripper_id: str = "", object_id: str = "",
               translation=(0.0, 0.0, 0.0), rotation=None) -> GraspRecord:
    from .urdf_morph import config_to_vector, rest_pose

    rq = np.array([1.0, 0.0, 0.0, 0.0]) if rotation is None else matrix_to_quat(rotation)
    return GraspRecord(gripper_id, object_id, np.asarray(translation, float), rq,
                       config_to_vector(tree, rest_pose(tree)))
