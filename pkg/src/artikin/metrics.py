"""Joint and surface evaluation metrics.

Axis direction error in degrees, axis line distance in centimeters, part
motion error (geodesic rotation degrees plus Euclidean translation), and
Chamfer distances reported x1000 over the static part, each movable part,
and the whole object.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from ._validation import check_points, check_unit
from .kinematics import rotation_about_axis
from .meshing import TriangleMesh

__all__ = [
    "axis_angle_error",
    "axis_pos_error",
    "part_motion_error",
    "geodesic_deg",
    "chamfer",
    "sample_surface",
    "align_labels",
    "label_agreement",
]


def axis_angle_error(pred_axis, gt_axis):
    """Angle between two joint axes in degrees; sign-agnostic."""
    a = check_unit(pred_axis, "pred_axis")
    b = check_unit(gt_axis, "gt_axis")
    return float(np.degrees(np.arccos(np.clip(abs(float(a @ b)), 0.0, 1.0))))


def axis_pos_error(pred_axis, pred_pivot, gt_axis, gt_pivot):
    """Minimum distance between the two infinite joint axes, in centimeters."""
    a = check_unit(pred_axis, "pred_axis")
    b = check_unit(gt_axis, "gt_axis")
    p = np.asarray(pred_pivot, dtype=np.float64)
    q = np.asarray(gt_pivot, dtype=np.float64)
    cross = np.cross(a, b)
    cn = np.linalg.norm(cross)
    diff = q - p
    if cn < 1e-9:
        dist = np.linalg.norm(np.cross(diff, a))
    else:
        dist = abs(float(diff @ cross)) / cn
    return 100.0 * float(dist)


def geodesic_deg(Ra, Rb):
    """Geodesic distance between two rotation matrices, in degrees."""
    Ra = np.asarray(Ra, dtype=np.float64)
    Rb = np.asarray(Rb, dtype=np.float64)
    cos = np.clip((np.trace(Ra.T @ Rb) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def part_motion_error(pred_joint, gt_axis, gt_rotation_deg, gt_translation):
    """State-0 to state-1 motion error: (geodesic degrees, translation units).

    The predicted relative rotation over the full interval is 2*theta about
    the predicted axis; the predicted relative translation is
    translation(1) - translation(0) = 2 * translation.
    """
    R_pred = rotation_about_axis(pred_joint.axis, 2.0 * pred_joint.theta)
    R_gt = rotation_about_axis(check_unit(gt_axis, "gt_axis"), np.radians(float(gt_rotation_deg)))
    rot_err = geodesic_deg(R_pred, R_gt)
    t_pred = 2.0 * pred_joint.translation
    t_err = float(np.linalg.norm(t_pred - np.asarray(gt_translation, dtype=np.float64)))
    return rot_err, t_err


def sample_surface(mesh, n, seed=0):
    """Sample n points uniformly by area from a triangle mesh."""
    if mesh.is_empty():
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    probs = areas / areas.sum()
    tri = rng.choice(len(areas), size=n, p=probs)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    a = mesh.vertices[mesh.faces[tri, 0]]
    b = mesh.vertices[mesh.faces[tri, 1]]
    c = mesh.vertices[mesh.faces[tri, 2]]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def _as_samples(obj, n_samples, seed):
    if isinstance(obj, TriangleMesh):
        return sample_surface(obj, n_samples, seed=seed)
    return check_points(obj, "points")


def chamfer(a, b, n_samples=10000, seed=0, squared=True, scale=1000.0):
    """Symmetric mean nearest-neighbor distance between surfaces.

    Meshes are sampled with ``n_samples`` points per side; point arrays are
    used as-is.  Defaults report the squared-distance convention x1000.
    """
    pa = _as_samples(a, n_samples, seed)
    pb = _as_samples(b, n_samples, seed + 1)
    d_ab, _ = cKDTree(pb).query(pa, workers=1)
    d_ba, _ = cKDTree(pa).query(pb, workers=1)
    if squared:
        val = 0.5 * (float(np.mean(d_ab**2)) + float(np.mean(d_ba**2)))
    else:
        val = 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))
    return scale * val


def align_labels(pred_labels, gt_labels, k):
    """Best part-id relabeling: maps predicted ids to ground-truth ids by
    maximizing the confusion-matrix diagonal (Hungarian assignment)."""
    pred = np.asarray(pred_labels, dtype=np.intp)
    gt = np.asarray(gt_labels, dtype=np.intp)
    if pred.shape != gt.shape:
        raise ValueError("label arrays must align")
    confusion = np.zeros((k, k))
    for p, g in zip(pred, gt):
        confusion[p, g] += 1.0
    rows, cols = linear_sum_assignment(-confusion)
    mapping = dict(zip(rows.tolist(), cols.tolist()))
    return mapping


def label_agreement(pred_labels, gt_labels, k):
    """Fraction of splats whose aligned predicted label matches ground truth."""
    mapping = align_labels(pred_labels, gt_labels, k)
    pred = np.asarray(pred_labels, dtype=np.intp)
    gt = np.asarray(gt_labels, dtype=np.intp)
    remapped = np.array([mapping[int(p)] for p in pred], dtype=np.intp)
    return float(np.mean(remapped == gt)), mapping
