"""Screw-motion evaluation and part-motion blending.

Each joint stores a decoupled screw: rotation angle ``theta`` about a unit
``axis`` through a ``pivot`` point, plus a ``translation`` vector.  Motion is
parameterized around the canonical state t* = 0.5, where every joint is the
identity; the angle and translation reached at state t scale linearly with
(t - t*) / t* = 2t - 1.  A splat's motion is the convex blend of per-part
rigid motions weighted by its segmentation mask.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from ._validation import check_simplex, check_state
from .scene import GaussianSet

logger = logging.getLogger(__name__)

__all__ = [
    "RigidTransform",
    "time_scale",
    "theta_at",
    "translation_at",
    "quat_at",
    "joint_transform",
    "blend_position",
    "blend_orientation",
    "transform_scene",
    "rotation_about_axis",
    "quat_to_matrix",
    "quat_multiply",
    "joint_rotations",
    "joint_offsets",
    "blend_positions",
    "blend_quaternions",
]


@dataclasses.dataclass(frozen=True)
class RigidTransform:
    """Rotation-then-offset rigid map x -> R x + offset."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6 or np.linalg.det(R) < 0.0:
            raise ValueError("rotation must be a proper rotation matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


def time_scale(t):
    """(t - t*) / t* with t* = 0.5; t outside [0, 1] is clamped with a warning."""
    t, clamped = check_state(t)
    if clamped:
        logger.warning("state t clamped to [0, 1]")
    return 2.0 * t - 1.0


def theta_at(joint, t):
    """Rotation angle reached at state t."""
    return time_scale(t) * joint.theta


def translation_at(joint, t):
    """Translation vector reached at state t."""
    return time_scale(t) * joint.translation


def quat_at(joint, t):
    """Time-varying unit rotation quaternion (w, x, y, z) of a joint."""
    half = 0.5 * theta_at(joint, t)
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = joint.axis * np.sin(half)
    return q


def rotation_about_axis(axis, angle):
    """Rodrigues rotation matrix for unit ``axis`` (3,) or axes (...,3)."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    A = _cross_matrix(axis)
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * A + (1.0 - c) * (A @ A)


def _cross_matrix(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def quat_to_matrix(q):
    """Rotation matrices for unit quaternions (...,4) in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Unit quaternion (w, x, y, z) of a rotation matrix, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    q = np.empty(4)
    tr = np.trace(R)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q[:] = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0)) * 2.0
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def axis_angle_to_matrix(w):
    """exp([w]x) for rotation vectors (...,3); exact for any magnitude."""
    w = np.asarray(w, dtype=np.float64)
    angle = np.linalg.norm(w, axis=-1)
    safe = np.where(angle > 1e-12, angle, 1.0)
    axis = w / safe[..., None]
    R = rotation_about_axis(axis, angle)
    if np.any(angle <= 1e-12):
        eye = np.broadcast_to(np.eye(3), R.shape)
        R = np.where((angle <= 1e-12)[..., None, None], eye, R)
    return R


def matrix_to_axis_angle(R):
    """Rotation vector (log map) of a rotation matrix; magnitude in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    if angle < 1e-9:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # Near pi: extract the axis from the symmetric part.
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(M), 0.0, None))
        i = int(np.argmax(axis))
        axis = M[:, i] / max(axis[i], 1e-12)
        axis = axis / np.linalg.norm(axis)
        return angle * axis
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / (2.0 * np.sin(angle))
    return angle * axis


def quat_multiply(a, b):
    """Hamilton product of quaternions (...,4), (w, x, y, z) order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def joint_transform(joint, t):
    """Rigid map x -> R(t)(x - pivot) + pivot + translation(t) at state t."""
    R = quat_to_matrix(quat_at(joint, t))
    offset = joint.pivot - R @ joint.pivot + translation_at(joint, t)
    return RigidTransform(rotation=R, translation=offset)


# ---------------------------------------------------------------------------
# Array-level kernels shared with the optimizer.
# ---------------------------------------------------------------------------

def joint_rotations(thetas, axes, t):
    """Per-part rotation matrices (k,3,3) at state t from raw joint arrays."""
    c = time_scale(t)
    return rotation_about_axis(axes, c * np.asarray(thetas, dtype=np.float64))


def joint_offsets(rotations, pivots, translations, t):
    """Per-part offsets b_j so that T_j(x) = R_j x + b_j, shape (k,3)."""
    c = time_scale(t)
    pivots = np.asarray(pivots, dtype=np.float64)
    translations = np.asarray(translations, dtype=np.float64)
    return pivots - np.einsum("kab,kb->ka", rotations, pivots) + c * translations


def blend_positions(masks, rotations, offsets, centers):
    """Mask-weighted blend of per-part rigid maps applied to centers (N,3)."""
    per_part = np.einsum("kab,nb->nka", rotations, centers) + offsets[None, :, :]
    return np.einsum("nk,nka->na", masks, per_part)


def blend_quaternions(masks, joint_quats, quats):
    """Sign-aligned weighted quaternion blend; one-hot masks recover the
    exact single-part rotation.  Degenerate near-zero sums fall back to the
    argmax part."""
    rotated = quat_multiply(joint_quats[None, :, :], quats[:, None, :])
    ref = rotated[np.arange(len(quats)), np.argmax(masks, axis=1)]
    sign = np.sign(np.einsum("nkc,nc->nk", rotated, ref))
    sign[sign == 0.0] = 1.0
    blended = np.einsum("nk,nk,nkc->nc", masks, sign, rotated)
    norms = np.linalg.norm(blended, axis=1)
    bad = norms < 1e-9
    if np.any(bad):
        blended[bad] = ref[bad]
        norms[bad] = np.linalg.norm(ref[bad], axis=1)
    return blended / norms[:, None]


# ---------------------------------------------------------------------------
# Scene-level operations.
# ---------------------------------------------------------------------------

def blend_position(mask, joints, t, mu):
    """Blend per-joint rigid motions of point ``mu`` with simplex weights."""
    mask = check_simplex(mask, "mask")
    mu = np.asarray(mu, dtype=np.float64)
    out = np.zeros(3)
    for m, joint in zip(mask, joints):
        out += m * joint_transform(joint, t).apply(mu)
    return out


def blend_orientation(mask, joints, t, orientation):
    """Blend per-joint rotations applied to a unit quaternion."""
    mask = check_simplex(mask, "mask")
    joint_quats = np.stack([quat_at(j, t) for j in joints])
    return blend_quaternions(mask[None, :], joint_quats, np.asarray(orientation, dtype=np.float64)[None, :])[0]


def _scene_arrays(scene, t, masks):
    thetas = np.array([j.theta for j in scene.joints])
    axes = np.stack([j.axis for j in scene.joints])
    pivots = np.stack([j.pivot for j in scene.joints])
    translations = np.stack([j.translation for j in scene.joints])
    R = joint_rotations(thetas, axes, t)
    b = joint_offsets(R, pivots, translations, t)
    centers = blend_positions(masks, R, b, scene.gaussians.centers)
    joint_quats = np.stack([quat_at(j, t) for j in scene.joints])
    quats = blend_quaternions(masks, joint_quats, scene.gaussians.quats)
    return centers, quats


def transform_scene(scene, t, masks=None, temperature=1.0):
    """Pose all splats at state t; scale, opacity, color, logits unchanged.

    At the canonical state every joint is the identity, so the input set is
    returned as-is (bit-identical geometry).
    """
    t_clamped, _ = check_state(t)
    if time_scale(t_clamped) == 0.0:
        return scene.gaussians
    if masks is None:
        from .segmentation import scene_masks

        masks = scene_masks(scene, temperature=temperature)
    centers, quats = _scene_arrays(scene, t_clamped, masks)
    return scene.gaussians.replace(centers=centers, quats=quats)


def relative_transform(joint, t0=0.0, t1=1.0):
    """Rigid map carrying state ``t0`` poses to state ``t1`` poses for one part."""
    f0 = joint_transform(joint, t0)
    f1 = joint_transform(joint, t1)
    R = f1.rotation @ f0.rotation.T
    offset = f1.translation - R @ f0.translation
    return RigidTransform(rotation=R, translation=offset)


def canonicalize_joint(joint, min_angle=1e-4):
    """Equivalent joint with the pivot on the motion's screw axis and a
    purely axial translation.

    The (pivot, translation) pair is redundant: shifting the pivot off the
    axis is absorbed by a compensating translation without changing the
    motion.  Joints with negligible rotation are returned unchanged (a pure
    translation has no finite axis line).
    """
    from .scene import JointParams

    if abs(2.0 * joint.theta) < min_angle:
        return joint
    rel = relative_transform(joint)
    a = joint.axis
    axial = float(rel.translation @ a) * a
    perp = rel.translation - axial
    # Fixed-point equation of the screw axis: (I - R) o* = t_perp.
    o_star, *_ = np.linalg.lstsq(np.eye(3) - rel.rotation, perp, rcond=None)
    o_star = o_star - float(o_star @ a) * a + float(joint.pivot @ a) * a
    return JointParams(theta=joint.theta, axis=a, pivot=o_star, translation=axial / 2.0)
