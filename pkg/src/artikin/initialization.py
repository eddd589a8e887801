"""Two-state initialization: dynamic splat identification, canonical-state
construction by Hungarian matching, part clustering, and pivot seeding.

The canonical set is built at t* = 0.5 by averaging matched splats across the
two observed states.  Dynamic/static classification uses a relative
one-sided-Chamfer criterion; pivots are seeded from static/part contact
regions found with the boundary-detection mechanism.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from sklearn.cluster import KMeans

from ._validation import check_points
from .kinematics import matrix_to_quat, rotation_about_axis
from .scene import GaussianSet, PartModel, SceneError

logger = logging.getLogger(__name__)

__all__ = [
    "TwoStateInput",
    "CanonicalInit",
    "identify_dynamic",
    "hungarian_match",
    "build_canonical",
    "cluster_parts",
    "init_pivots",
    "init_joint_guesses",
    "fit_state_gaussians",
]

DEFAULT_TAU = 0.02
MAX_HUNGARIAN = 2048
LOGIT_INIT = 2.0
MIN_FIT_POINTS = 100


@dataclasses.dataclass(frozen=True)
class TwoStateInput:
    """Per-state splat sets plus the dynamic-identification threshold."""

    gaussians_t0: GaussianSet
    gaussians_t1: GaussianSet
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if len(self.gaussians_t0) == 0 or len(self.gaussians_t1) == 0:
            raise SceneError("two_state_input", "both state sets must be non-empty")
        tau = float(self.tau)
        if not (0.0 < tau < 1.0):
            raise SceneError("two_state_input.tau", f"must lie in (0, 1), got {tau}")
        object.__setattr__(self, "tau", tau)


@dataclasses.dataclass(frozen=True)
class CanonicalInit:
    """Canonical-state splats with per-splat motion bookkeeping.

    ``displacements`` holds the matched state-0 -> state-1 center displacement
    of each canonical splat (zero for static or unmatched ones).
    """

    gaussians: GaussianSet
    is_dynamic: np.ndarray
    displacements: np.ndarray


def identify_dynamic(set_a, set_b, tau=DEFAULT_TAU):
    """Boolean mask over ``set_a``: splats whose nearest-center distance to
    ``set_b`` exceeds ``tau`` times the maximum such distance."""
    a = set_a.centers if isinstance(set_a, GaussianSet) else check_points(set_a, "set_a")
    b = set_b.centers if isinstance(set_b, GaussianSet) else check_points(set_b, "set_b")
    d, _ = cKDTree(b).query(a, workers=1)
    x = d.max()
    if x == 0.0:
        return np.zeros(len(a), dtype=bool)
    return d > tau * x


def hungarian_match(costs):
    """Minimum-cost perfect assignment of a square cost matrix.

    Returns the permutation p with row i matched to column p[i].
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2 or costs.shape[0] != costs.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {costs.shape}")
    if not np.all(np.isfinite(costs)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(costs)
    perm = np.empty(costs.shape[0], dtype=np.intp)
    perm[rows] = cols
    return perm


def _merge_pairs(g0, g1, idx0, idx1):
    """Componentwise means of paired splats (quaternions sign-aligned)."""
    q0 = g0.quats[idx0]
    q1 = g1.quats[idx1]
    sign = np.where(np.einsum("nc,nc->n", q0, q1) < 0.0, -1.0, 1.0)
    q = q0 + sign[:, None] * q1
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return dict(
        centers=0.5 * (g0.centers[idx0] + g1.centers[idx1]),
        quats=q,
        scales=0.5 * (g0.scales[idx0] + g1.scales[idx1]),
        opacities=0.5 * (g0.opacities[idx0] + g1.opacities[idx1]),
        colors=0.5 * (g0.colors[idx0] + g1.colors[idx1]),
        seg_logits=0.5 * (g0.seg_logits[idx0] + g1.seg_logits[idx1]),
    )


def _take(g, idx):
    return dict(
        centers=g.centers[idx],
        quats=g.quats[idx],
        scales=g.scales[idx],
        opacities=g.opacities[idx],
        colors=g.colors[idx],
        seg_logits=g.seg_logits[idx],
    )


def build_canonical(two_state_input, seed=0, max_hungarian=MAX_HUNGARIAN):
    """Construct the canonical splat set as the matched mean of both states.

    Dynamic splats are paired across states by Hungarian assignment on center
    distance (cost matrices capped at ``max_hungarian`` per side, remainder by
    nearest neighbor); static splats pair by mutual nearest neighbor, with
    unmatched ones carried over unaveraged.  State 0 is the reference side.
    """
    g0, g1 = two_state_input.gaussians_t0, two_state_input.gaussians_t1
    dyn0 = identify_dynamic(g0, g1, two_state_input.tau)
    dyn1 = identify_dynamic(g1, g0, two_state_input.tau)
    rng = np.random.default_rng(seed)

    blocks = []
    flags = []
    disps = []

    idx0 = np.flatnonzero(dyn0)
    idx1 = np.flatnonzero(dyn1)
    if idx0.size and idx1.size:
        m = min(idx0.size, idx1.size, max_hungarian)
        sub0 = np.sort(rng.choice(idx0, size=m, replace=False)) if idx0.size > m else idx0
        sub1 = np.sort(rng.choice(idx1, size=m, replace=False)) if idx1.size > m else idx1
        cost = np.linalg.norm(g0.centers[sub0][:, None, :] - g1.centers[sub1][None, :, :], axis=2)
        perm = hungarian_match(cost)
        pair0, pair1 = sub0, sub1[perm]
        rest0 = np.setdiff1d(idx0, sub0, assume_unique=True)
        if rest0.size:
            _, nn = cKDTree(g1.centers[idx1]).query(g0.centers[rest0], workers=1)
            pair0 = np.concatenate([pair0, rest0])
            pair1 = np.concatenate([pair1, idx1[nn]])
        blocks.append(_merge_pairs(g0, g1, pair0, pair1))
        flags.append(np.ones(pair0.size, dtype=bool))
        disps.append(g1.centers[pair1] - g0.centers[pair0])
    elif idx0.size:
        blocks.append(_take(g0, idx0))
        flags.append(np.ones(idx0.size, dtype=bool))
        disps.append(np.zeros((idx0.size, 3)))

    st0 = np.flatnonzero(~dyn0)
    st1 = np.flatnonzero(~dyn1)
    if st0.size and st1.size:
        _, nn01 = cKDTree(g1.centers[st1]).query(g0.centers[st0], workers=1)
        _, nn10 = cKDTree(g0.centers[st0]).query(g1.centers[st1], workers=1)
        mutual = nn10[nn01] == np.arange(st0.size)
        p0 = st0[mutual]
        p1 = st1[nn01[mutual]]
        if p0.size:
            blocks.append(_merge_pairs(g0, g1, p0, p1))
            flags.append(np.zeros(p0.size, dtype=bool))
            disps.append(np.zeros((p0.size, 3)))
        lone0 = st0[~mutual]
        if lone0.size:
            blocks.append(_take(g0, lone0))
            flags.append(np.zeros(lone0.size, dtype=bool))
            disps.append(np.zeros((lone0.size, 3)))
        matched1 = np.zeros(st1.size, dtype=bool)
        matched1[nn01[mutual]] = True
        lone1 = st1[~matched1]
        if lone1.size:
            blocks.append(_take(g1, lone1))
            flags.append(np.zeros(lone1.size, dtype=bool))
            disps.append(np.zeros((lone1.size, 3)))
    elif st0.size:
        blocks.append(_take(g0, st0))
        flags.append(np.zeros(st0.size, dtype=bool))
        disps.append(np.zeros((st0.size, 3)))

    if not blocks:
        raise SceneError("build_canonical", "no splats left after matching")
    merged = {key: np.concatenate([blk[key] for blk in blocks]) for key in blocks[0]}
    return CanonicalInit(
        gaussians=GaussianSet(**merged),
        is_dynamic=np.concatenate(flags),
        displacements=np.concatenate(disps),
    )


def cluster_parts(canonical, is_dynamic, k, seed=0):
    """Initial part model and hard labels: static splats form part 0,
    dynamic splats are split into k-1 k-means clusters.

    Part scales start isotropic at the inverse cluster radius (the farthest
    member distance), so distance scores grow gently for large parts.
    """
    if k < 2:
        raise SceneError("cluster_parts", f"need k >= 2 parts, got {k}")
    centers = canonical.centers if isinstance(canonical, GaussianSet) else canonical.gaussians.centers
    is_dynamic = np.asarray(is_dynamic, dtype=bool)
    dyn_idx = np.flatnonzero(is_dynamic)
    if dyn_idx.size == 0:
        raise SceneError("cluster_parts", f"{k} parts requested but no motion detected")
    if dyn_idx.size < k - 1:
        raise SceneError("cluster_parts", f"only {dyn_idx.size} dynamic splats for {k - 1} moving parts")

    labels = np.zeros(centers.shape[0], dtype=np.intp)
    if k == 2:
        labels[dyn_idx] = 1
    else:
        km = KMeans(n_clusters=k - 1, init="k-means++", n_init=1, max_iter=50, random_state=int(seed))
        labels[dyn_idx] = km.fit_predict(centers[dyn_idx]) + 1

    O = np.zeros((k, 3))
    lam = np.ones((k, 3))
    for j in range(k):
        member = centers[labels == j]
        if member.shape[0] == 0:
            O[j] = centers.mean(axis=0)
            continue
        O[j] = member.mean(axis=0)
        radius = float(np.linalg.norm(member - O[j], axis=1).max())
        lam[j] = 1.0 / max(radius, 1e-3)
    part_model = PartModel(centers=O, orientations=np.tile(np.eye(3), (k, 1, 1)), scales=lam)
    return part_model, labels


def init_seg_logits(n, k, labels, value=LOGIT_INIT):
    logits = np.zeros((n, k))
    logits[np.arange(n), labels] = value
    return logits


def init_pivots(centers, labels, k, knn_k=10, beta=0.2):
    """Seed joint pivots from static/part contact regions.

    For part j, splats of parts {0, j} whose restricted k-nearest neighborhood
    mixes the two labels form the contact region; the pivot is its mean center,
    falling back to the part centroid when no contact exists.
    """
    centers = check_points(centers, "centers")
    labels = np.asarray(labels, dtype=np.intp)
    pivots = np.zeros((k, 3))
    for j in range(1, k):
        sel = np.flatnonzero((labels == 0) | (labels == j))
        part_members = centers[labels == j]
        if part_members.shape[0] == 0:
            continue
        fallback = part_members.mean(axis=0)
        if sel.size < 2:
            pivots[j] = fallback
            continue
        pts = centers[sel]
        lab = labels[sel]
        kq = min(knn_k, sel.size - 1)
        _, nbr = cKDTree(pts).query(pts, k=kq + 1, workers=1)
        nbr = nbr[:, 1:]
        frac = np.mean(lab[nbr] != lab[:, None], axis=1)
        contact = frac >= beta
        pivots[j] = pts[contact].mean(axis=0) if contact.any() else fallback
    return pivots


def _axis_grid(n=48):
    """Fibonacci hemisphere directions (axis sign is carried by the angle)."""
    i = np.arange(n)
    golden = (1.0 + 5.0**0.5) / 2.0
    z = (i + 0.5) / n
    az = 2.0 * np.pi * i / golden
    r = np.sqrt(1.0 - z**2)
    return np.stack([r * np.cos(az), r * np.sin(az), z], axis=1)

def _coarse_rotation_scan(p0, p1, rng, n_axes=48, angle_step_deg=10, top=3):
    """Rank candidate relative rotations by one-sided Chamfer after
    mean-aligning translation; returns the best few."""
    tree = cKDTree(p1)
    sub = p0 if len(p0) <= 300 else p0[rng.choice(len(p0), size=300, replace=False)]
    mu0, mu1 = p0.mean(axis=0), p1.mean(axis=0)
    candidates = [np.eye(3)]
    for axis in _axis_grid(n_axes):
        for deg in range(-90, 91, angle_step_deg):
            if deg == 0:
                continue
            candidates.append(rotation_about_axis(axis, np.radians(deg)))
    scored = []
    for R in candidates:
        d, _ = tree.query(sub @ R.T + (mu1 - R @ mu0), workers=1)
        scored.append((float(np.mean(d**2)), R))
    scored.sort(key=lambda s: s[0])
    return [R for _, R in scored[:top]]

def _icp_refine(p0, p1, R, iters=40, trim=0.9):
    """Trimmed point-to-point ICP; returns (R, t_rel, mean squared residual)."""
    tree = cKDTree(p1)
    t = p1.mean(axis=0) - R @ p0.mean(axis=0)
    for _ in range(iters):
        moved = p0 @ R.T + t
        d, idx = tree.query(moved, workers=1)
        keep = d <= np.quantile(d, trim)
        p, q = p0[keep], p1[idx[keep]]
        mu_p, mu_q = p.mean(axis=0), q.mean(axis=0)
        H = (p - mu_p).T @ (q - mu_q)
        U, _, Vt = np.linalg.svd(H)
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
        R = Vt.T @ D @ U.T
        t = mu_q - R @ mu_p
    d, _ = tree.query(p0 @ R.T + t, workers=1)
    return R, t, float(np.mean(d**2))

def estimate_relative_motion(p0, p1, seed=0, max_icp_points=800):
    """Rigid motion x1 = R x0 + t between two point sets of one part.

    Deterministic coarse rotation scan (Fibonacci axes x 10 degree angles,
    translation mean-aligned per candidate) followed by trimmed ICP from the
    best candidates.
    """
    rng = np.random.default_rng(seed)
    q0 = p0 if len(p0) <= max_icp_points else p0[rng.choice(len(p0), size=max_icp_points, replace=False)]
    q1 = p1 if len(p1) <= max_icp_points else p1[rng.choice(len(p1), size=max_icp_points, replace=False)]
    results = [_icp_refine(q0, q1, R0) for R0 in _coarse_rotation_scan(q0, q1, rng)]
    R, t, cost = min(results, key=lambda r: r[2])
    return R, t, cost

def init_joint_guesses(canonical, labels, k, pivots, seed=0):
    """Per-joint warm starts from registering each part's matched endpoint
    sets across states.

    The estimated state-0 -> state-1 motion (R, t_rel) decomposes against
    the seeded pivot o into the canonical screw parameterization:
    R = R(2 theta) about the axis, and (R + I) tau = t_rel - (I - R) o.
    """
    from .kinematics import matrix_to_axis_angle

    thetas = np.zeros(k)
    axes = np.tile(np.array([0.0, 0.0, 1.0]), (k, 1))
    translations = np.zeros((k, 3))
    for j in range(1, k):
        member = (labels == j) & canonical.is_dynamic
        if member.sum() < 10:
            continue
        cen = canonical.gaussians.centers[member]
        disp = canonical.displacements[member]
        R, t_rel, _ = estimate_relative_motion(cen - disp / 2.0, cen + disp / 2.0, seed=seed)
        w = matrix_to_axis_angle(R)
        angle = float(np.linalg.norm(w))
        if angle > 1e-8:
            axes[j] = w / angle
        thetas[j] = min(angle / 2.0, np.pi / 2.0 - 1e-9)
        rhs = t_rel - (np.eye(3) - R) @ pivots[j]
        translations[j] = np.linalg.lstsq(R + np.eye(3), rhs, rcond=None)[0]
    return thetas, axes, translations


def initialize_scene(two_state_input, k, seed=0, knn_k=10, beta=0.2):
    """Full initialization pipeline: canonical set, part model, labels,
    pivots, and joint warm starts.  Returns (scene, init_report)."""
    from .scene import ArticulatedScene, JointParams

    canonical = build_canonical(two_state_input, seed=seed)
    part_model, labels = cluster_parts(canonical, canonical.is_dynamic, k, seed=seed)
    centers = canonical.gaussians.centers
    pivots = init_pivots(centers, labels, k, knn_k=knn_k, beta=beta)
    thetas, axes, translations = init_joint_guesses(canonical, labels, k, pivots, seed=seed)

    joints = [JointParams.identity()]
    for j in range(1, k):
        joints.append(
            JointParams(theta=float(thetas[j]), axis=axes[j], pivot=pivots[j], translation=translations[j])
        )
    logits = init_seg_logits(len(canonical.gaussians), k, labels)
    gaussians = canonical.gaussians.replace(seg_logits=logits)
    scene = ArticulatedScene(gaussians=gaussians, joints=tuple(joints), part_model=part_model, k=k)

    report = {
        "n_canonical": len(gaussians),
        "n_dynamic": int(canonical.is_dynamic.sum()),
        "n_static": int((~canonical.is_dynamic).sum()),
        "part_counts": [int((labels == j).sum()) for j in range(k)],
        "cluster_radii": [float(1.0 / part_model.scales[j, 0]) for j in range(k)],
        "pivots": pivots.tolist(),
        "init_axes": axes.tolist(),
        "init_translations": translations.tolist(),
    }
    return scene, report


def fit_state_gaussians(points, normals, colors=None, opacity=0.9, seed=0, max_points=None):
    """Build one planar splat per oriented point.

    Each splat centers on its point with the shortest axis along the normal;
    the tangential scale is the local neighbor spacing h and the normal scale
    h/10.  Requires at least 100 points.
    """
    points = check_points(points, "points")
    normals = check_points(normals, "normals")
    if points.shape != normals.shape:
        raise SceneError("fit_state_gaussians", "points and normals must align")
    n = points.shape[0]
    if n < MIN_FIT_POINTS:
        raise SceneError("fit_state_gaussians", f"need at least {MIN_FIT_POINTS} points, got {n}")
    if max_points is not None and n > max_points:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(n, size=max_points, replace=False))
        points, normals = points[keep], normals[keep]
        if colors is not None:
            colors = np.asarray(colors)[keep]
        n = max_points

    nn = min(4, n - 1)
    d, _ = cKDTree(points).query(points, k=nn + 1, workers=1)
    h = d[:, 1:].mean(axis=1)
    h = np.maximum(h, 1e-6)
    scales = np.stack([h, h, h / 10.0], axis=1)

    unit = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    quats = np.empty((n, 4))
    helper = np.where(np.abs(unit[:, 2:3]) < 0.9, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    t1 = np.cross(helper, unit)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(unit, t1)
    for i in range(n):
        R = np.stack([t1[i], t2[i], unit[i]], axis=1)
        quats[i] = matrix_to_quat(R)

    if colors is None:
        colors = np.full((n, 3), 0.7)
    return GaussianSet(
        centers=points,
        quats=quats,
        scales=scales,
        opacities=np.full(n, float(opacity)),
        colors=colors,
        seg_logits=np.zeros((n, 1)),
    )
