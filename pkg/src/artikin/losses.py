"""Training objectives for joint splat/segmentation/joint-parameter fitting.

Terms: photometric render loss (L1 + D-SSIM), planar scale loss, part-center
regularization, the time-continuous depth/normal consistency term, boundary
vote loss (delegated to :mod:`segmentation`), and a Chamfer alignment term
that substitutes for photometric supervision in geometry mode.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
from scipy.ndimage import correlate
from scipy.spatial import cKDTree

from . import segmentation
from .renderer import image_gradient, normal_from_depth, render
from .scene import GaussianSet

logger = logging.getLogger(__name__)

__all__ = [
    "LossWeights",
    "LossReport",
    "l_render",
    "ssim",
    "l_scale",
    "grad_normal",
    "l_geo",
    "l_center",
    "l_align_geometry",
    "chamfer_sq",
    "total_loss",
]

COVER_THRESHOLD = 0.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclasses.dataclass(frozen=True)
class LossWeights:
    """Non-negative weights of the total objective.

    ``normal`` weights the geometry-mode normal-compatibility term that
    pairs with the Chamfer alignment; photometric supervision sees surface
    orientation, so its geometric surrogate must too.
    """

    render: float = 1.0
    scale: float = 100.0
    center: float = 0.1
    geo: float = 0.05
    vote: float = 0.01
    dssim: float = 0.2
    normal: float = 0.2

    def __post_init__(self):
        for name in ("render", "scale", "center", "geo", "vote", "dssim", "normal"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"loss weight {name} must be a finite non-negative number")
            object.__setattr__(self, name, v)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in {f.name for f in dataclasses.fields(cls)}})


@dataclasses.dataclass(frozen=True)
class LossReport:
    """Per-term loss values with their weighted total."""

    terms: dict
    weighted: dict
    total: float

    @classmethod
    def build(cls, terms, weights):
        weighted = {
            "render": weights.render * terms["render"],
            "scale": weights.scale * terms["scale"],
            "center": weights.center * terms["center"],
            "geo": weights.geo * terms["geo"],
            "vote": weights.vote * terms["vote"],
            "normal": weights.normal * terms.get("normal", 0.0),
        }
        total = float(sum(weighted.values()))
        if not np.isfinite(total):
            raise ValueError(f"non-finite loss total: {terms}")
        terms = dict(terms)
        terms.setdefault("normal", 0.0)
        return cls(terms=terms, weighted=weighted, total=total)

    def to_dict(self):
        return {"terms": dict(self.terms), "weighted": dict(self.weighted), "total": self.total}


def _gauss_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


_SSIM_WINDOW = _gauss_window()


def _valid_filter(img, win):
    pad = win.shape[0] // 2
    full = correlate(img, win, mode="constant")
    return full[pad:-pad, pad:-pad]


def ssim(a, b):
    """Mean SSIM over the valid (fully-windowed) region, 11x11 Gaussian window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mu_x = _valid_filter(x, _SSIM_WINDOW)
        mu_y = _valid_filter(y, _SSIM_WINDOW)
        sxx = _valid_filter(x * x, _SSIM_WINDOW) - mu_x**2
        syy = _valid_filter(y * y, _SSIM_WINDOW) - mu_y**2
        sxy = _valid_filter(x * y, _SSIM_WINDOW) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def l_render(rendered, target, lambda_dssim=0.2):
    """(1 - lambda) * L1 + lambda * D-SSIM, D-SSIM = (1 - SSIM) / 2."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    l1 = float(np.mean(np.abs(rendered - target)))
    if lambda_dssim == 0.0:
        return l1
    dssim = (1.0 - ssim(rendered, target)) / 2.0
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim


def l_scale(gaussians):
    """Mean smallest scale component; drives splats toward flat planes."""
    if isinstance(gaussians, GaussianSet):
        scales = gaussians.scales
    else:
        scales = np.asarray(gaussians, dtype=np.float64)
    return float(np.mean(np.min(scales, axis=1)))


def grad_normal(scene, camera, t0, maps_t0=None, maps_star=None, temperature=1.0):
    """Difference approximation of the normal map's time derivative at t0.

    Computes (N(t0) - N(t*)) / (t0 - t*) with t* = 0.5; the canonical render
    is a constant in any gradient computation.  Returns (map (H,W,3), valid).
    """
    if t0 not in (0.0, 1.0):
        raise ValueError(f"t0 must be 0 or 1, got {t0}")
    if maps_t0 is None:
        maps_t0 = render(scene, camera, t0, temperature=temperature)
    if maps_star is None:
        maps_star = render(scene, camera, 0.5, temperature=temperature)
    dn = (maps_t0.normal - maps_star.normal) / (t0 - 0.5)
    valid = (maps_t0.alpha > COVER_THRESHOLD) & (maps_star.alpha > COVER_THRESHOLD)
    return np.where(valid[..., None], dn, 0.0), valid


def l_geo(scene, camera, t0, target_image=None, temperature=1.0, maps_t0=None, maps_star=None):
    """Time-continuous depth/normal consistency at state t0 in {0, 1}.

    Mean over valid pixels of (1 - grad I) * (|Nbar - N|_1 + |dNbar - dN|_1),
    where Nbar comes from the unbiased depth map and both time derivatives use
    the difference approximation against the canonical state.
    """
    if t0 not in (0.0, 1.0):
        raise ValueError(f"t0 must be 0 or 1, got {t0}")
    if maps_t0 is None:
        maps_t0 = render(scene, camera, t0, temperature=temperature)
    if maps_star is None:
        maps_star = render(scene, camera, 0.5, temperature=temperature)

    nbar_t0, ok_t0 = normal_from_depth(maps_t0.depth, camera, maps_t0.valid_depth)
    nbar_star, ok_star = normal_from_depth(maps_star.depth, camera, maps_star.valid_depth)
    inv_dt = 1.0 / (t0 - 0.5)
    dn = (maps_t0.normal - maps_star.normal) * inv_dt
    dnbar = (nbar_t0 - nbar_star) * inv_dt

    valid = (
        (maps_t0.alpha > COVER_THRESHOLD)
        & (maps_star.alpha > COVER_THRESHOLD)
        & ok_t0
        & ok_star
    )
    if not valid.any():
        logger.warning("l_geo: no valid pixels")
        return 0.0
    grad_img = image_gradient(target_image if target_image is not None else maps_t0.color)
    per_pixel = (1.0 - grad_img) * (
        np.abs(nbar_t0 - maps_t0.normal).sum(axis=-1) + np.abs(dnbar - dn).sum(axis=-1)
    )
    return float(per_pixel[valid].mean())


def l_center(scene, masks=None, temperature=1.0):
    """Mean squared distance from part centers to their members' mean position."""
    if masks is None:
        masks = segmentation.scene_masks(scene, temperature=temperature)
    labels = np.argmax(masks, axis=1)
    centers = scene.gaussians.centers
    O = scene.part_model.centers
    vals = []
    for j in range(scene.k):
        member = labels == j
        if not member.any():
            continue
        diff = O[j] - centers[member].mean(axis=0)
        vals.append(float(diff @ diff))
    return float(np.mean(vals)) if vals else 0.0


def chamfer_sq(a, b, workers=1):
    """Symmetric mean squared nearest-neighbor distance between point sets."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("chamfer_sq: empty point set")
    d_ab, _ = cKDTree(b).query(a, workers=workers)
    d_ba, _ = cKDTree(a).query(b, workers=workers)
    return 0.5 * (float(np.mean(d_ab**2)) + float(np.mean(d_ba**2)))


def l_align_geometry(scene, target, t, masks=None, temperature=1.0):
    """Symmetric squared Chamfer distance between posed splat centers at
    state t and a target splat set fitted at that state."""
    from .kinematics import transform_scene

    posed = transform_scene(scene, t, masks=masks, temperature=temperature)
    target_centers = target.centers if isinstance(target, GaussianSet) else np.asarray(target, dtype=np.float64)
    return chamfer_sq(posed.centers, target_centers)


def total_loss(
    scene,
    observations,
    weights=None,
    mode="geometry",
    temperature=1.0,
    knn_k=segmentation.DEFAULT_KNN,
    beta=segmentation.DEFAULT_BETA,
    vote_state=None,
    vote_seed=0,
):
    """Weighted total objective over all observed states and views.

    State terms are averaged over states and then over views within a state.
    In geometry mode the alignment term fills the render slot and the
    render-based consistency term is inactive.
    """
    if weights is None:
        weights = LossWeights()
    if mode not in ("geometry", "render"):
        raise ValueError(f"unknown mode {mode!r}")
    observations = sorted(observations, key=lambda o: o.t)
    if not observations:
        raise ValueError("need at least one observation")

    masks = segmentation.scene_masks(scene, temperature=temperature)
    terms = {
        "scale": l_scale(scene.gaussians),
        "center": l_center(scene, masks=masks),
    }
    if vote_state is None:
        try:
            boundary = segmentation.detect_boundary(
                scene, knn_k=knn_k, beta=beta, masks=masks, seed=vote_seed
            )
            vote_state = segmentation.region_votes(scene.gaussians.centers, masks, boundary)
        except Exception:
            vote_state = []
    terms["vote"] = segmentation.vote_loss(vote_state, masks)

    render_vals = []
    geo_vals = []
    for obs in observations:
        if mode == "geometry":
            if obs.gaussian_set is None:
                raise ValueError(f"geometry mode needs a target gaussian_set at t={obs.t}")
            render_vals.append(
                l_align_geometry(scene, obs.gaussian_set, obs.t, masks=masks, temperature=temperature)
            )
        else:
            view_render = []
            view_geo = []
            for cam, img in obs.views:
                maps_t0 = render(scene, cam, obs.t, temperature=temperature)
                view_render.append(l_render(maps_t0.color, img, lambda_dssim=weights.dssim))
                if obs.t in (0.0, 1.0):
                    maps_star = render(scene, cam, 0.5, temperature=temperature)
                    view_geo.append(
                        l_geo(scene, cam, obs.t, target_image=img, maps_t0=maps_t0, maps_star=maps_star)
                    )
            if not view_render:
                raise ValueError(f"render mode needs views at t={obs.t}")
            render_vals.append(float(np.mean(view_render)))
            if view_geo:
                geo_vals.append(float(np.mean(view_geo)))
    terms["render"] = float(np.mean(render_vals))
    terms["geo"] = float(np.mean(geo_vals)) if geo_vals else 0.0
    return LossReport.build(terms, weights)
