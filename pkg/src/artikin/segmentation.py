"""Distance-based part masks and local consistent voting.

Part membership combines a Mahalanobis distance to learnable part centers
with per-splat residual logits: mask = softmax((logits - gamma) / temperature).
Splats whose spatial neighborhood mixes part labels are "boundary" splats;
their masks are regularized toward a locally voted distribution.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.spatial import cKDTree
from sklearn.cluster import KMeans

from ._validation import check_points, check_simplex
from .scene import SceneError

__all__ = [
    "PartMask",
    "BoundarySet",
    "mahalanobis",
    "mahalanobis_sq",
    "part_mask",
    "softmax_masks",
    "scene_masks",
    "detect_boundary",
    "vote_regions",
    "vote_distribution",
    "vote_loss",
    "kl_divergence",
]

PROB_FLOOR = 1e-8
DEFAULT_KNN = 10
DEFAULT_BETA = 0.2
KMEANS_MAX_ITER = 50


@dataclasses.dataclass(frozen=True)
class PartMask:
    """A point on the k-part probability simplex."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", check_simplex(self.probs, "part_mask.probs"))

    @property
    def argmax(self):
        return int(np.argmax(self.probs))


@dataclasses.dataclass(frozen=True)
class BoundarySet:
    """Boundary splat indices and their local-region assignment."""

    indices: np.ndarray
    regions: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp)
        reg = np.asarray(self.regions, dtype=np.intp)
        if idx.shape != reg.shape:
            raise SceneError("boundary", "indices and regions must align")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "regions", reg)

    def __len__(self):
        return self.indices.shape[0]

    @property
    def n_regions(self):
        return 0 if len(self) == 0 else int(self.regions.max()) + 1


def mahalanobis_sq(part_centers, part_orientations, part_scales, points):
    """Squared part distances gamma, shape (N, k).

    For point mu and part j: L = diag(scale_j) @ V_j @ (mu - O_j), with the
    rotation applied first so the per-axis scaling acts in the part's frame;
    gamma_j = ||L||^2.
    """
    points = check_points(points, "points")
    r = points[:, None, :] - part_centers[None, :, :]
    y = np.einsum("kab,nkb->nka", part_orientations, r)
    L = part_scales[None, :, :] * y
    return np.einsum("nka,nka->nk", L, L)


def mahalanobis(part_model, mu):
    """Squared Mahalanobis distances from one point to every part, shape (k,)."""
    return mahalanobis_sq(part_model.centers, part_model.orientations, part_model.scales, mu)[0]


def softmax_masks(gamma, logits, temperature=1.0):
    """Row-wise softmax((logits - gamma) / temperature), shape (N, k)."""
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    u = (np.asarray(logits, dtype=np.float64) - np.asarray(gamma, dtype=np.float64)) / temperature
    u = u - u.max(axis=-1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=-1, keepdims=True)


def part_mask(gamma, logits, temperature=1.0):
    """Segmentation mask of one splat from its part distances and logits."""
    probs = softmax_masks(np.atleast_2d(gamma), np.atleast_2d(logits), temperature)[0]
    return PartMask(probs=probs)


def scene_masks(scene, temperature=1.0):
    """Masks of every splat in a scene, shape (N, k)."""
    pm = scene.part_model
    gamma = mahalanobis_sq(pm.centers, pm.orientations, pm.scales, scene.gaussians.centers)
    return softmax_masks(gamma, scene.gaussians.seg_logits, temperature)


def detect_boundary(scene, knn_k=DEFAULT_KNN, beta=DEFAULT_BETA, masks=None, temperature=1.0, seed=0):
    """Flag splats whose k-nearest neighbors mix part labels.

    A splat of argmax part j is a boundary splat when at least a ``beta``
    fraction of its ``knn_k`` nearest neighbors (by center distance) has a
    different argmax part.  Returns a BoundarySet with regions assigned by
    :func:`vote_regions`.
    """
    if knn_k < 1:
        raise ValueError("knn_k must be >= 1")
    centers = scene.gaussians.centers
    n = centers.shape[0]
    if n < knn_k + 1:
        raise SceneError("boundary", f"need at least knn_k+1={knn_k + 1} splats, got {n}")
    if masks is None:
        masks = scene_masks(scene, temperature=temperature)
    labels = np.argmax(masks, axis=1)
    tree = cKDTree(centers)
    _, nbr = tree.query(centers, k=knn_k + 1, workers=1)
    nbr = nbr[:, 1:]
    frac = np.mean(labels[nbr] != labels[:, None], axis=1)
    idx = np.flatnonzero(frac >= beta)
    if idx.size == 0:
        return BoundarySet(indices=idx, regions=np.empty(0, dtype=np.intp))
    regions = vote_regions(centers[idx], scene.k, seed=seed)
    return BoundarySet(indices=idx, regions=regions)


def vote_regions(boundary_centers, k, seed=0):
    """Split boundary splats into min(4k, n) local regions with k-means.

    k-means++ initialization, iteration cap 50, deterministic for a seed.
    """
    pts = check_points(boundary_centers, "boundary_centers")
    n = pts.shape[0]
    if n == 0:
        raise SceneError("boundary", "empty boundary set")
    n_regions = min(4 * int(k), n)
    if n_regions == n:
        return np.arange(n, dtype=np.intp)
    km = KMeans(
        n_clusters=n_regions,
        init="k-means++",
        n_init=1,
        max_iter=KMEANS_MAX_ITER,
        random_state=int(seed),
        algorithm="lloyd",
    )
    return km.fit_predict(pts).astype(np.intp)


def vote_distribution(member_masks, member_deltas):
    """Region vote: softmax(-delta)-weighted mask average on the simplex."""
    masks = np.atleast_2d(np.asarray(member_masks, dtype=np.float64))
    deltas = np.asarray(member_deltas, dtype=np.float64).reshape(-1)
    if masks.shape[0] != deltas.shape[0] or masks.shape[0] == 0:
        raise SceneError("vote", "need one distance per member mask")
    w = np.exp(-(deltas - deltas.min()))
    w = w / w.sum()
    vote = w @ masks
    total = vote.sum()
    if total <= 0.0:
        raise SceneError("vote", "degenerate vote distribution")
    return vote / total


def region_votes(centers, masks, boundary):
    """Frozen vote targets per region: list of (member_indices, vote)."""
    out = []
    for r in range(boundary.n_regions):
        sel = boundary.regions == r
        members = boundary.indices[sel]
        pts = centers[members]
        delta = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
        out.append((members, vote_distribution(masks[members], delta)))
    return out


def kl_divergence(p, q, floor=PROB_FLOOR):
    """KL(p || q) with probabilities floored inside the logs."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pf = np.maximum(p, floor)
    qf = np.maximum(q, floor)
    return float(np.sum(p * (np.log(pf) - np.log(qf))))


def vote_loss(regions, masks):
    """Mean over regions of mean member KL(vote || mask).

    ``regions`` is the output of :func:`region_votes`; an empty region list
    contributes zero.
    """
    if not regions:
        return 0.0
    total = 0.0
    for members, vote in regions:
        vals = [kl_divergence(vote, masks[i]) for i in members]
        total += float(np.mean(vals))
    return total / len(regions)
