"""Domain types for articulated scenes built from planar Gaussian splats.

All types are immutable value objects: arrays are copied on construction and
marked read-only, so instances can be shared freely across threads.  Mutation
happens only through the optimizer, which builds fresh instances.
"""

from __future__ import annotations

import dataclasses
import numpy as np

from ._validation import as_float_array, check_finite

__all__ = [
    "SceneError",
    "PlanarGaussian",
    "GaussianSet",
    "JointParams",
    "PartModel",
    "Camera",
    "ArticulatedScene",
    "StateObservation",
    "QUAT_TOL",
    "AXIS_TOL",
    "SCALE_FLOOR",
    "THETA_LIMIT",
]

QUAT_TOL = 1e-6
AXIS_TOL = 1e-6
SCALE_FLOOR = 1e-7
THETA_LIMIT = np.pi / 2.0


class SceneError(ValueError):
    """An invariant violation, reported with the offending field path."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


def _check_quats(q, field):
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > QUAT_TOL):
        raise SceneError(field, f"quaternion norm off unit by more than {QUAT_TOL}")


@dataclasses.dataclass(frozen=True)
class PlanarGaussian:
    """A single planar splat: an oriented surface element with soft part labels.

    ``scale`` components are strictly positive; the smallest axis defines the
    splat normal.  ``opacity`` lies strictly inside (0, 1).  ``seg_logits`` are
    residual logits added to the distance-based part scores.
    """

    center: np.ndarray
    orientation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    seg_logits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(as_float_array(self.center, "center", shape=(3,))))
        q = as_float_array(self.orientation, "orientation", shape=(4,))
        _check_quats(q, "orientation")
        object.__setattr__(self, "orientation", _frozen(q))
        s = as_float_array(self.scale, "scale", shape=(3,))
        if np.any(s <= 0.0):
            raise SceneError("scale", "all components must be strictly positive")
        object.__setattr__(self, "scale", _frozen(s))
        op = float(self.opacity)
        if not (0.0 < op < 1.0):
            raise SceneError("opacity", f"must lie strictly inside (0, 1), got {op}")
        object.__setattr__(self, "opacity", op)
        c = as_float_array(self.color, "color", shape=(3,))
        if np.any(c < 0.0) or np.any(c > 1.0):
            raise SceneError("color", "components must lie in [0, 1]")
        object.__setattr__(self, "color", _frozen(c))
        z = as_float_array(self.seg_logits, "seg_logits", ndim=1)
        object.__setattr__(self, "seg_logits", _frozen(check_finite(z, "seg_logits")))


class GaussianSet:
    """A batch of planar Gaussians stored as read-only struct-of-arrays.

    Fields: ``centers`` (N,3), ``quats`` (N,4) unit, ``scales`` (N,3) positive,
    ``opacities`` (N,) in (0,1), ``colors`` (N,3) in [0,1], ``seg_logits`` (N,k).
    """

    __slots__ = ("centers", "quats", "scales", "opacities", "colors", "seg_logits")

    def __init__(self, centers, quats, scales, opacities, colors, seg_logits):
        centers = as_float_array(centers, "gaussians.centers", shape=(None, 3))
        n = centers.shape[0]
        quats = as_float_array(quats, "gaussians.quats", shape=(n, 4))
        _check_quats(quats, "gaussians.quats")
        scales = as_float_array(scales, "gaussians.scales", shape=(n, 3))
        if np.any(scales <= 0.0):
            raise SceneError("gaussians.scales", "all components must be strictly positive")
        opacities = as_float_array(opacities, "gaussians.opacities", shape=(n,))
        if np.any(opacities <= 0.0) or np.any(opacities >= 1.0):
            raise SceneError("gaussians.opacities", "values must lie strictly inside (0, 1)")
        colors = as_float_array(colors, "gaussians.colors", shape=(n, 3))
        if np.any(colors < 0.0) or np.any(colors > 1.0):
            raise SceneError("gaussians.colors", "components must lie in [0, 1]")
        seg_logits = as_float_array(seg_logits, "gaussians.seg_logits", shape=(n, None))
        check_finite(centers, "gaussians.centers")
        check_finite(seg_logits, "gaussians.seg_logits")
        self.centers = _frozen(centers)
        self.quats = _frozen(quats)
        self.scales = _frozen(scales)
        self.opacities = _frozen(opacities)
        self.colors = _frozen(colors)
        self.seg_logits = _frozen(seg_logits)

    def __len__(self):
        return self.centers.shape[0]

    @property
    def n_channels(self):
        return self.seg_logits.shape[1]

    def __getitem__(self, i):
        return PlanarGaussian(
            center=self.centers[i],
            orientation=self.quats[i],
            scale=self.scales[i],
            opacity=self.opacities[i],
            color=self.colors[i],
            seg_logits=self.seg_logits[i],
        )

    def replace(self, **fields):
        """Return a copy with the given arrays replaced."""
        kwargs = {
            "centers": self.centers,
            "quats": self.quats,
            "scales": self.scales,
            "opacities": self.opacities,
            "colors": self.colors,
            "seg_logits": self.seg_logits,
        }
        kwargs.update(fields)
        return GaussianSet(**kwargs)

    def subset(self, index):
        return GaussianSet(
            self.centers[index],
            self.quats[index],
            self.scales[index],
            self.opacities[index],
            self.colors[index],
            self.seg_logits[index],
        )

    @classmethod
    def from_gaussians(cls, gaussians):
        gaussians = list(gaussians)
        if not gaussians:
            raise SceneError("gaussians", "empty Gaussian list")
        return cls(
            centers=[g.center for g in gaussians],
            quats=[g.orientation for g in gaussians],
            scales=[g.scale for g in gaussians],
            opacities=[g.opacity for g in gaussians],
            colors=[g.color for g in gaussians],
            seg_logits=[g.seg_logits for g in gaussians],
        )

    def allclose(self, other, atol=1e-9):
        return (
            np.allclose(self.centers, other.centers, atol=atol)
            and np.allclose(self.quats, other.quats, atol=atol)
            and np.allclose(self.scales, other.scales, atol=atol)
            and np.allclose(self.opacities, other.opacities, atol=atol)
            and np.allclose(self.colors, other.colors, atol=atol)
            and np.allclose(self.seg_logits, other.seg_logits, atol=atol)
        )


@dataclasses.dataclass(frozen=True)
class JointParams:
    """Decoupled screw parameters of one joint.

    ``theta`` is the half-range rotation angle reached at state t=1 (the full
    state-0 to state-1 rotation is 2*theta about ``axis`` through ``pivot``);
    ``translation`` likewise is the t=1 translation vector.
    """

    theta: float
    axis: np.ndarray
    pivot: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        th = float(self.theta)
        if not np.isfinite(th):
            raise SceneError("joint.theta", "must be finite")
        if abs(th) > THETA_LIMIT + 1e-12:
            raise SceneError("joint.theta", f"must lie in [-pi/2, pi/2], got {th}")
        object.__setattr__(self, "theta", th)
        a = as_float_array(self.axis, "joint.axis", shape=(3,))
        if abs(np.linalg.norm(a) - 1.0) > AXIS_TOL:
            raise SceneError("joint.axis", "must be a unit vector")
        object.__setattr__(self, "axis", _frozen(a))
        object.__setattr__(self, "pivot", _frozen(as_float_array(self.pivot, "joint.pivot", shape=(3,))))
        object.__setattr__(
            self, "translation", _frozen(as_float_array(self.translation, "joint.translation", shape=(3,)))
        )

    @classmethod
    def identity(cls):
        return cls(theta=0.0, axis=(0.0, 0.0, 1.0), pivot=(0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0))

    def is_identity(self):
        return self.theta == 0.0 and not self.translation.any()


@dataclasses.dataclass(frozen=True)
class PartModel:
    """Learnable part centers with per-part frames and scale vectors.

    ``centers`` (k,3), ``orientations`` (k,3,3) rotation matrices, ``scales``
    (k,3) strictly positive inverse-extent vectors used by the Mahalanobis
    part distances.
    """

    centers: np.ndarray
    orientations: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        O = as_float_array(self.centers, "part_model.centers", shape=(None, 3))
        k = O.shape[0]
        V = as_float_array(self.orientations, "part_model.orientations", shape=(k, 3, 3))
        eye = np.eye(3)
        for j in range(k):
            if np.max(np.abs(V[j] @ V[j].T - eye)) > 1e-6 or np.linalg.det(V[j]) < 0.0:
                raise SceneError(f"part_model.orientations[{j}]", "must be a proper rotation matrix")
        lam = as_float_array(self.scales, "part_model.scales", shape=(k, 3))
        if np.any(lam <= 0.0):
            raise SceneError("part_model.scales", "all components must be strictly positive")
        object.__setattr__(self, "centers", _frozen(O))
        object.__setattr__(self, "orientations", _frozen(V))
        object.__setattr__(self, "scales", _frozen(lam))

    @property
    def k(self):
        return self.centers.shape[0]


@dataclasses.dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics K, world-to-camera pose, image size.

    Pixel (row i, col j) maps to image-plane coordinates (u=j, v=i); K follows
    the usual convention u = fx*X/Z + cx.
    """

    K: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = as_float_array(self.K, "camera.K", shape=(3, 3))
        if K[0, 0] <= 0.0 or K[1, 1] <= 0.0:
            raise SceneError("camera.K", "focal lengths must be positive")
        R = as_float_array(self.rotation, "camera.rotation", shape=(3, 3))
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise SceneError("camera.rotation", "must be orthonormal")
        t = as_float_array(self.translation, "camera.translation", shape=(3,))
        object.__setattr__(self, "K", _frozen(K))
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.width <= 0 or self.height <= 0:
            raise SceneError("camera.size", "width and height must be positive")

    def to_camera(self, points):
        """World points (N,3) -> camera frame."""
        return points @ self.rotation.T + self.translation

    def pixel_rays(self):
        """Per-pixel camera-frame ray directions K^-1 [u, v, 1], shape (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        ones = np.ones_like(u)
        pix = np.stack([u, v, ones], axis=-1)
        Kinv = np.linalg.inv(self.K)
        return pix @ Kinv.T

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fov_deg=50.0, width=96, height=96):
        """Build a camera at ``eye`` looking toward ``target`` (+z forward)."""
        eye = np.asarray(eye, dtype=float)
        forward = np.asarray(target, dtype=float) - eye
        fn = np.linalg.norm(forward)
        if fn < 1e-12:
            raise SceneError("camera.look_at", "eye and target coincide")
        forward = forward / fn
        upv = np.asarray(up, dtype=float)
        right = np.cross(forward, upv)
        if np.linalg.norm(right) < 1e-8:
            upv = np.array([0.0, 1.0, 0.0])
            right = np.cross(forward, upv)
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=0)
        t = -R @ eye
        f = 0.5 * max(width, height) / np.tan(np.radians(fov_deg) / 2.0)
        K = np.array([[f, 0.0, (width - 1) / 2.0], [0.0, f, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
        return cls(K=K, rotation=R, translation=t, width=width, height=height)


@dataclasses.dataclass(frozen=True)
class ArticulatedScene:
    """A k-part articulated object: splats, per-part joints, part model.

    Part 0 is the static part; ``joints[0]`` is frozen to the identity and is
    never updated.  Every splat carries k segmentation logits.
    """

    gaussians: GaussianSet
    joints: tuple
    part_model: PartModel
    k: int

    def __post_init__(self):
        k = int(self.k)
        if k < 2:
            raise SceneError("scene.k", f"need at least 2 parts, got {k}")
        joints = tuple(self.joints)
        if len(joints) != k:
            raise SceneError("scene.joints", f"expected {k} joints, got {len(joints)}")
        for j, joint in enumerate(joints):
            if not isinstance(joint, JointParams):
                raise SceneError(f"scene.joints[{j}]", "expected JointParams")
        if not joints[0].is_identity():
            raise SceneError("scene.joints[0]", "static joint must stay the identity")
        if self.gaussians.n_channels != k:
            raise SceneError(
                "gaussians.seg_logits",
                f"length {self.gaussians.n_channels} does not match part count k={k}",
            )
        if self.part_model.k != k:
            raise SceneError("part_model", f"part model has {self.part_model.k} parts, expected {k}")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "joints", joints)

    def replace(self, **fields):
        kwargs = {
            "gaussians": self.gaussians,
            "joints": self.joints,
            "part_model": self.part_model,
            "k": self.k,
        }
        kwargs.update(fields)
        return ArticulatedScene(**kwargs)


@dataclasses.dataclass(frozen=True)
class StateObservation:
    """Everything observed at one articulation state t in [0, 1]."""

    t: float
    views: tuple = ()
    gaussian_set: GaussianSet | None = None

    def __post_init__(self):
        t = float(self.t)
        if not (0.0 <= t <= 1.0):
            raise SceneError("observation.t", f"state must lie in [0, 1], got {t}")
        object.__setattr__(self, "t", t)
        views = tuple(self.views)
        for idx, (cam, img) in enumerate(views):
            img = as_float_array(img, f"observation.views[{idx}].image", ndim=3)
            if img.shape[0] != cam.height or img.shape[1] != cam.width:
                raise SceneError(
                    f"observation.views[{idx}]",
                    f"image shape {img.shape[:2]} does not match camera {cam.height}x{cam.width}",
                )
        object.__setattr__(self, "views", views)
