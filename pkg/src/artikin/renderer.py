"""CPU forward rasterizer for planar Gaussian splats.

Produces color, alpha, plane-distance, unbiased depth, normal, and
segmentation maps at any state t.  Splats are composited front to back with
alpha blending; per-pixel depth is recovered as the ray/splat-plane
intersection, D = d / (N . K^-1 rho), which is exact for a single opaque
planar splat.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from ._validation import check_state
from .kinematics import quat_to_matrix, transform_scene
from .segmentation import scene_masks

__all__ = [
    "RenderMaps",
    "SplatFootprint",
    "project_splat",
    "render",
    "normal_from_depth",
    "image_gradient",
]

NEAR_PLANE = 1e-3
ALPHA_CLIP = 0.99
ALPHA_SKIP = 1.0 / 255.0
TRANSMITTANCE_STOP = 1e-4
COV_DILATION = 0.3
FOOTPRINT_SIGMAS = 3.0


@dataclasses.dataclass
class RenderMaps:
    """Per-view maps at a queried state.

    ``color`` (H,W,3), ``alpha`` (H,W), ``distance`` (H,W) signed camera-to-
    plane distances, ``depth`` (H,W) positive where ``valid_depth``,
    ``normal`` (H,W,3) unit camera-space normals where covered, ``seg``
    (H,W,k) on the simplex where covered.
    """

    color: np.ndarray
    alpha: np.ndarray
    distance: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    seg: np.ndarray
    valid_depth: np.ndarray


@dataclasses.dataclass(frozen=True)
class SplatFootprint:
    """2D projection of one splat: mean, covariance, opacity-scaled weight."""

    mean: np.ndarray
    cov: np.ndarray
    opacity: float

    def weight(self, pixels):
        """alpha(rho) = opacity * G(rho), clipped to [0, ALPHA_CLIP]."""
        d = np.atleast_2d(np.asarray(pixels, dtype=np.float64)) - self.mean
        inv = np.linalg.inv(self.cov)
        power = -0.5 * np.einsum("na,ab,nb->n", d, inv, d)
        return np.clip(self.opacity * np.exp(power), 0.0, ALPHA_CLIP)


def _camera_space(gaussians, camera):
    """Centers, rotations, normals, plane distances in the camera frame."""
    centers_c = camera.to_camera(gaussians.centers)
    R_world = quat_to_matrix(gaussians.quats)
    R_cam = np.einsum("ab,nbc->nac", camera.rotation, R_world)
    short_axis = np.argmin(gaussians.scales, axis=1)
    normals = R_cam[np.arange(len(gaussians)), :, short_axis]
    # Flip so every normal faces the camera (n . view_dir < 0).
    flip = np.einsum("na,na->n", normals, centers_c) > 0.0
    normals[flip] *= -1.0
    dists = np.einsum("na,na->n", normals, centers_c)
    return centers_c, R_cam, normals, dists


def _project_cov(center_c, R_cam, scale, K):
    fx, fy = K[0, 0], K[1, 1]
    x, y, z = center_c
    J = np.array([[fx / z, 0.0, -fx * x / z**2], [0.0, fy / z, -fy * y / z**2]])
    cov3d = R_cam @ np.diag(scale**2) @ R_cam.T
    cov2d = J @ cov3d @ J.T
    cov2d[0, 0] += COV_DILATION
    cov2d[1, 1] += COV_DILATION
    return cov2d


def project_splat(gaussian, camera):
    """EWA projection of one posed splat to its 2D image footprint.

    Returns None for splats behind the near plane (skipped, not an error).
    """
    center_c = camera.to_camera(gaussian.center[None, :])[0]
    if center_c[2] <= NEAR_PLANE:
        return None
    R_cam = camera.rotation @ quat_to_matrix(gaussian.orientation)
    cov2d = _project_cov(center_c, R_cam, gaussian.scale, camera.K)
    fx, fy = camera.K[0, 0], camera.K[1, 1]
    cx, cy = camera.K[0, 2], camera.K[1, 2]
    mean = np.array([fx * center_c[0] / center_c[2] + cx, fy * center_c[1] / center_c[2] + cy])
    return SplatFootprint(mean=mean, cov=cov2d, opacity=float(gaussian.opacity))


def render(scene, camera, t=0.5, temperature=1.0, background=0.0):
    """Rasterize a scene posed at state t into :class:`RenderMaps`.

    Splats are sorted by camera depth (ties broken by index) and composited
    front to back; accumulation for a pixel stops once its transmittance
    falls below ``TRANSMITTANCE_STOP``.
    """
    t, _ = check_state(t)
    masks = scene_masks(scene, temperature=temperature)
    posed = transform_scene(scene, t, masks=masks)
    return render_gaussians(posed, camera, masks=masks, background=background)


def render_gaussians(gaussians, camera, masks=None, background=0.0):
    """Rasterize an already-posed Gaussian set."""
    H, W = camera.height, camera.width
    k = masks.shape[1] if masks is not None else gaussians.seg_logits.shape[1]
    if masks is None:
        masks = np.zeros((len(gaussians), k))
        masks[:, 0] = 1.0

    centers_c, R_cam, normals, dists = _camera_space(gaussians, camera)
    rays = camera.pixel_rays()

    acc_color = np.zeros((H, W, 3))
    acc_alpha = np.zeros((H, W))
    acc_dist = np.zeros((H, W))
    acc_normal = np.zeros((H, W, 3))
    acc_seg = np.zeros((H, W, k))
    transmittance = np.ones((H, W))

    in_front = centers_c[:, 2] > NEAR_PLANE
    order = np.lexsort((np.arange(len(gaussians)), centers_c[:, 2]))
    order = order[in_front[order]]

    fx, fy = camera.K[0, 0], camera.K[1, 1]
    cx, cy = camera.K[0, 2], camera.K[1, 2]
    colors = gaussians.colors
    opacities = gaussians.opacities
    scales = gaussians.scales

    for i in order:
        z = centers_c[i, 2]
        mean = np.array([fx * centers_c[i, 0] / z + cx, fy * centers_c[i, 1] / z + cy])
        cov = _project_cov(centers_c[i], R_cam[i], scales[i], camera.K)
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
        if det <= 0.0:
            continue
        radius = FOOTPRINT_SIGMAS * np.sqrt(max(cov[0, 0], cov[1, 1]))
        x0 = max(int(np.floor(mean[0] - radius)), 0)
        x1 = min(int(np.ceil(mean[0] + radius)) + 1, W)
        y0 = max(int(np.floor(mean[1] - radius)), 0)
        y1 = min(int(np.ceil(mean[1] + radius)) + 1, H)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1, dtype=np.float64) - mean[0]
        ys = np.arange(y0, y1, dtype=np.float64) - mean[1]
        dx, dy = np.meshgrid(xs, ys)
        inv00 = cov[1, 1] / det
        inv11 = cov[0, 0] / det
        inv01 = -cov[0, 1] / det
        power = -0.5 * (inv00 * dx * dx + 2.0 * inv01 * dx * dy + inv11 * dy * dy)
        alpha = np.clip(opacities[i] * np.exp(power), 0.0, ALPHA_CLIP)
        tile_T = transmittance[y0:y1, x0:x1]
        alpha[(alpha < ALPHA_SKIP) | (tile_T < TRANSMITTANCE_STOP)] = 0.0
        if not alpha.any():
            continue
        w = alpha * tile_T
        acc_color[y0:y1, x0:x1] += w[..., None] * colors[i]
        acc_alpha[y0:y1, x0:x1] += w
        acc_dist[y0:y1, x0:x1] += w * dists[i]
        acc_normal[y0:y1, x0:x1] += w[..., None] * normals[i]
        acc_seg[y0:y1, x0:x1] += w[..., None] * masks[i]
        transmittance[y0:y1, x0:x1] = tile_T * (1.0 - alpha)

    covered = acc_alpha > 0.0
    safe_alpha = np.where(covered, acc_alpha, 1.0)
    distance = np.where(covered, acc_dist / safe_alpha, 0.0)
    normal_raw = acc_normal / safe_alpha[..., None]
    seg = np.where(covered[..., None], acc_seg / safe_alpha[..., None], 0.0)

    denom = np.einsum("hwa,hwa->hw", normal_raw, rays)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(np.abs(denom) > 1e-12, distance / denom, 0.0)
    valid_depth = covered & (np.abs(denom) > 1e-12) & (depth > NEAR_PLANE) & np.isfinite(depth)
    depth = np.where(valid_depth, depth, 0.0)

    nlen = np.linalg.norm(normal_raw, axis=-1)
    unit_normal = np.where((nlen > 1e-12)[..., None], normal_raw / np.maximum(nlen, 1e-12)[..., None], 0.0)

    color = acc_color + background * (1.0 - acc_alpha)[..., None]
    return RenderMaps(
        color=np.clip(color, 0.0, 1.0),
        alpha=acc_alpha,
        distance=distance,
        depth=depth,
        normal=unit_normal,
        seg=seg,
        valid_depth=valid_depth,
    )


def normal_from_depth(depth, camera, valid=None):
    """Estimate camera-space normals from a depth map.

    Back-projects the 4-neighborhood of each pixel and takes the normalized
    cross product of the two central differences, oriented toward the camera.
    Returns (normals (H,W,3), valid mask); pixels with an invalid neighbor are
    excluded.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    if valid is None:
        valid = depth > 0.0
    pts = camera.pixel_rays() * depth[..., None]

    normals = np.zeros((H, W, 3))
    ok = np.zeros((H, W), dtype=bool)
    ok[1:-1, 1:-1] = (
        valid[1:-1, :-2] & valid[1:-1, 2:] & valid[:-2, 1:-1] & valid[2:, 1:-1] & valid[1:-1, 1:-1]
    )
    du = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(du, dv)
    ln = np.linalg.norm(n, axis=-1)
    interior_ok = ok[1:-1, 1:-1] & (ln > 1e-12)
    n = np.where((ln > 1e-12)[..., None], n / np.maximum(ln, 1e-12)[..., None], 0.0)
    # Orient toward the camera: n . p < 0 at the surface point.
    dots = np.einsum("hwa,hwa->hw", n, pts[1:-1, 1:-1])
    n = np.where((dots > 0.0)[..., None], -n, n)
    normals[1:-1, 1:-1] = np.where(interior_ok[..., None], n, 0.0)
    ok[1:-1, 1:-1] = interior_ok
    return normals, ok


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 4.0


def image_gradient(image):
    """Normalized Sobel magnitude of an image, clamped to [0, 1].

    Color images are averaged to luminance first; a unit step edge maps to 1.
    """
    from scipy.ndimage import convolve

    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    gx = convolve(img, _SOBEL_X, mode="nearest")
    gy = convolve(img, _SOBEL_X.T, mode="nearest")
    return np.clip(np.hypot(gx, gy), 0.0, 1.0)
