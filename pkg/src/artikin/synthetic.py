"""Synthetic articulated scenes with exact ground truth.

Builds box/panel assemblies (hinged door, sliding drawer, screw cap,
multi-door cabinet), samples oriented surface points, poses them at the two
observed states via ground-truth screws, and emits per-state splat sets.
A seeded global rigid pose is applied to every scene so nothing is
axis-aligned by construction.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from ._validation import check_unit
from .initialization import TwoStateInput, fit_state_gaussians
from .kinematics import rotation_about_axis
from .scene import SceneError

__all__ = ["GtJoint", "GroundTruth", "make_scene", "SCENE_KINDS"]

SCENE_KINDS = ("hinge", "drawer", "screw", "cabinet")

_PALETTE = np.array(
    [
        [0.65, 0.65, 0.7],
        [0.85, 0.35, 0.3],
        [0.3, 0.6, 0.85],
        [0.4, 0.75, 0.4],
        [0.85, 0.7, 0.3],
        [0.6, 0.4, 0.75],
        [0.8, 0.5, 0.6],
    ]
)


@dataclasses.dataclass(frozen=True)
class GtJoint:
    """Ground-truth screw carrying part poses from state 0 to state 1."""

    axis: np.ndarray
    pivot: np.ndarray
    rotation_deg: float
    translation: np.ndarray
    kind: str

    def __post_init__(self):
        object.__setattr__(self, "axis", check_unit(self.axis, "gt.axis"))
        object.__setattr__(self, "pivot", np.asarray(self.pivot, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        rot = float(self.rotation_deg)
        trans = float(np.linalg.norm(self.translation))
        if self.kind == "revolute" and trans > 1e-12:
            raise SceneError("gt.kind", "revolute joints carry no translation")
        if self.kind == "prismatic" and abs(rot) > 1e-12:
            raise SceneError("gt.kind", "prismatic joints carry no rotation")
        if self.kind not in ("revolute", "prismatic", "screw"):
            raise SceneError("gt.kind", f"unknown joint kind {self.kind!r}")
        object.__setattr__(self, "rotation_deg", rot)

    def pose_points(self, points, fraction):
        """Pose points by the screw at ``fraction`` of the full motion."""
        R = rotation_about_axis(self.axis, np.radians(self.rotation_deg) * fraction)
        return (points - self.pivot) @ R.T + self.pivot + fraction * self.translation

    def pose_normals(self, normals, fraction):
        R = rotation_about_axis(self.axis, np.radians(self.rotation_deg) * fraction)
        return normals @ R.T

    def to_dict(self):
        return {
            "axis": self.axis.tolist(),
            "pivot": self.pivot.tolist(),
            "rotation_deg": self.rotation_deg,
            "translation": self.translation.tolist(),
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            axis=d["axis"],
            pivot=d["pivot"],
            rotation_deg=d["rotation_deg"],
            translation=d["translation"],
            kind=d["kind"],
        )


@dataclasses.dataclass(frozen=True)
class GroundTruth:
    """Everything needed to score a fit: per-joint screws and labeled points."""

    k: int
    joints: tuple
    labels: np.ndarray
    base_points: np.ndarray
    base_normals: np.ndarray
    noise: float
    seed: int

    def joint_for_part(self, part):
        if not (1 <= part < self.k):
            raise ValueError(f"movable part index must lie in [1, {self.k - 1}], got {part}")
        return self.joints[part - 1]

    def points_at(self, t):
        """Noise-free labeled points posed at state t in [0, 1]."""
        pts = self.base_points.copy()
        for part in range(1, self.k):
            member = self.labels == part
            pts[member] = self.joint_for_part(part).pose_points(pts[member], float(t))
        return pts, self.labels.copy()

    def to_dict(self):
        return {
            "k": self.k,
            "joints": [j.to_dict() for j in self.joints],
            "labels": self.labels.tolist(),
            "base_points": self.base_points.tolist(),
            "base_normals": self.base_normals.tolist(),
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            k=int(d["k"]),
            joints=tuple(GtJoint.from_dict(j) for j in d["joints"]),
            labels=np.asarray(d["labels"], dtype=np.intp),
            base_points=np.asarray(d["base_points"], dtype=np.float64),
            base_normals=np.asarray(d["base_normals"], dtype=np.float64),
            noise=float(d["noise"]),
            seed=int(d["seed"]),
        )


def sample_box(center, half, n, rng, exclude_faces=()):
    """Sample n points with outward normals on a box surface, area-weighted.

    Faces are indexed +x,-x,+y,-y,+z,-z; ``exclude_faces`` leaves openings
    (cabinet fronts, drawer slots).
    """
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(half, dtype=np.float64)
    areas = np.array(
        [half[1] * half[2], half[1] * half[2], half[0] * half[2], half[0] * half[2], half[0] * half[1], half[0] * half[1]]
    )
    for f in exclude_faces:
        areas[f] = 0.0
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for f in range(6):
        sel = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * half[axis]
        pts[sel, others[0]] = u[sel, 0] * half[others[0]]
        pts[sel, others[1]] = u[sel, 1] * half[others[1]]
        nrm[sel, axis] = sign
    return pts + center, nrm


def _scene_layout(kind, k, theta_total_deg, translation):
    """Part boxes and ground-truth screws of one assembly, in local frame.

    Bodies are open where a movable part covers them (cabinet fronts, drawer
    slots), as real articulated objects are, so part motion is visible in the
    state-to-state geometry.
    """
    if kind == "hinge":
        boxes = [((0.0, 0.0, 0.0), (0.35, 0.3, 0.35), (0,)), ((0.37, 0.0, 0.0), (0.02, 0.3, 0.3), ())]
        trans = float(translation)
        joint_kind = "revolute" if trans == 0.0 else "screw"
        joints = [
            GtJoint(
                axis=(0.0, 0.0, 1.0),
                pivot=(0.37, -0.3, 0.0),
                rotation_deg=theta_total_deg,
                translation=(0.0, 0.0, trans),
                kind=joint_kind,
            )
        ]
    elif kind == "drawer":
        boxes = [((0.0, 0.0, 0.0), (0.3, 0.22, 0.14), (0,)), ((0.04, 0.0, 0.0), (0.24, 0.16, 0.1), ())]
        trans = float(translation) if translation else 0.3
        joints = [
            GtJoint(
                axis=(1.0, 0.0, 0.0),
                pivot=(0.04, 0.0, 0.0),
                rotation_deg=0.0,
                translation=(trans, 0.0, 0.0),
                kind="prismatic",
            )
        ]
    elif kind == "screw":
        boxes = [
            ((0.0, 0.0, -0.04), (0.22, 0.22, 0.16), ()),
            # Cap with an offset knob so the part is not rotationally symmetric.
            ((0.0, 0.0, 0.18), (0.16, 0.1, 0.05), ()),
            ((0.12, 0.07, 0.26), (0.05, 0.04, 0.03), ()),
        ]
        trans = float(translation) if translation else 0.1
        joints = [
            GtJoint(
                axis=(0.0, 0.0, 1.0),
                pivot=(0.0, 0.0, 0.17),
                rotation_deg=theta_total_deg,
                translation=(0.0, 0.0, trans),
                kind="screw" if trans else "revolute",
            )
        ]
    elif kind == "cabinet":
        boxes = [
            ((0.0, 0.0, 0.0), (0.45, 0.3, 0.35), (2,)),
            ((-0.25, 0.32, 0.0), (0.2, 0.02, 0.3), ()),
            ((0.25, 0.32, 0.0), (0.2, 0.02, 0.3), ()),
            ((0.0, 0.0, 0.45), (0.3, 0.25, 0.06), ()),
        ]
        trans = float(translation) if translation else 0.25
        joints = [
            GtJoint(
                axis=(0.0, 0.0, 1.0),
                pivot=(-0.45, 0.32, 0.0),
                rotation_deg=theta_total_deg,
                translation=(0.0, 0.0, 0.0),
                kind="revolute",
            ),
            GtJoint(
                axis=(0.0, 0.0, 1.0),
                pivot=(0.45, 0.32, 0.0),
                rotation_deg=-0.75 * theta_total_deg,
                translation=(0.0, 0.0, 0.0),
                kind="revolute",
            ),
            GtJoint(
                axis=(0.0, 1.0, 0.0),
                pivot=(0.0, 0.0, 0.45),
                rotation_deg=0.0,
                translation=(0.0, trans, 0.0),
                kind="prismatic",
            ),
        ]
    else:
        raise SceneError("make_scene.kind", f"unknown kind {kind!r}; choose from {SCENE_KINDS}")
    part_of_box = list(range(len(joints) + 1))
    if kind == "screw":
        part_of_box = [0, 1, 1]
    expected_k = len(joints) + 1
    if k != expected_k:
        raise SceneError("make_scene.k", f"kind {kind!r} has {expected_k} parts, got k={k}")
    return boxes, joints, part_of_box


def _random_pose(rng):
    v = rng.normal(size=3)
    angle = rng.uniform(0.0, np.pi)
    axis = v / np.linalg.norm(v)
    R = rotation_about_axis(axis, angle)
    offset = rng.uniform(-0.1, 0.1, size=3)
    return R, offset


def make_scene(kind="hinge", k=2, theta_total_deg=60.0, translation=0.0, noise=1e-3, n_gaussians=2000, seed=0):
    """Generate a two-state synthetic scene and its ground truth.

    ``n_gaussians`` is the per-state splat count, split across parts by
    surface area.  Returns (TwoStateInput, GroundTruth).
    """
    rng = np.random.default_rng(seed)
    boxes, joints_local, part_of_box = _scene_layout(kind, k, float(theta_total_deg), translation)

    areas = []
    for _, half, excl in boxes:
        h = np.asarray(half)
        face_areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
        for f in excl:
            face_areas[f] = 0.0
        areas.append(4.0 * face_areas.sum())
    areas = np.asarray(areas)
    counts = np.maximum((n_gaussians * areas / areas.sum()).astype(int), 50)

    pts_parts, nrm_parts, lab_parts = [], [], []
    for (center, half, excl), cnt, part in zip(boxes, counts, part_of_box):
        p, nv = sample_box(center, half, int(cnt), rng, exclude_faces=excl)
        pts_parts.append(p)
        nrm_parts.append(nv)
        lab_parts.append(np.full(int(cnt), part, dtype=np.intp))
    base_points = np.concatenate(pts_parts)
    base_normals = np.concatenate(nrm_parts)
    labels = np.concatenate(lab_parts)

    # Seeded global rigid pose so no scene is axis-aligned by construction.
    Rg, offset = _random_pose(rng)
    base_points = base_points @ Rg.T + offset
    base_normals = base_normals @ Rg.T
    joints = tuple(
        GtJoint(
            axis=Rg @ j.axis,
            pivot=Rg @ j.pivot + offset,
            rotation_deg=j.rotation_deg,
            translation=Rg @ j.translation,
            kind=j.kind,
        )
        for j in joints_local
    )
    gt = GroundTruth(
        k=k,
        joints=joints,
        labels=labels,
        base_points=base_points,
        base_normals=base_normals,
        noise=float(noise),
        seed=int(seed),
    )

    sets = []
    for state, sub in ((0.0, 1), (1.0, 2)):
        pts, _ = gt.points_at(state)
        nrm = base_normals.copy()
        for part in range(1, k):
            member = labels == part
            nrm[member] = gt.joint_for_part(part).pose_normals(nrm[member], state)
        if noise > 0.0:
            state_rng = np.random.default_rng(seed * 1000 + sub)
            pts = pts + state_rng.normal(scale=noise, size=pts.shape)
        colors = _PALETTE[labels % len(_PALETTE)]
        sets.append(fit_state_gaussians(pts, nrm, colors=colors))
    return TwoStateInput(gaussians_t0=sets[0], gaussians_t1=sets[1]), gt
