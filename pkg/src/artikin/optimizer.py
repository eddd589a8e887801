"""Joint optimization of splats, segmentation logits, part model, and screw
parameters against the weighted total objective.

Geometry-mode terms (alignment, scale, center, vote) carry exact analytic
gradients through the motion blend and the softmax masks; render-based terms
(photometric, depth/normal consistency) use central finite differences
restricted to the low-dimensional joint and part-model blocks.  The canonical
state render is cached and never differentiated.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import tempfile

import numpy as np
from scipy.spatial import cKDTree

from . import segmentation
from .initialization import TwoStateInput, initialize_scene
from .kinematics import (
    axis_angle_to_matrix,
    matrix_to_axis_angle,
    rotation_about_axis,
)
from .losses import LossReport, LossWeights, l_geo, l_render
from .renderer import render_gaussians
from .scene import (
    SCALE_FLOOR,
    THETA_LIMIT,
    ArticulatedScene,
    GaussianSet,
    JointParams,
    PartModel,
)

logger = logging.getLogger(__name__)

__all__ = [
    "FitConfig",
    "FitResult",
    "ParamLayout",
    "gradients",
    "step",
    "fit",
]


@dataclasses.dataclass
class FitConfig:
    """Optimizer configuration; mirrors the CLI config JSON one-to-one."""

    k: int = 2
    mode: str = "geometry"
    iterations: int = 3000
    seed: int = 0
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    lr_joints: float = 1e-3
    lr_logits: float = 1e-2
    lr_gaussians: float = 2e-4
    fd_step: float = 1e-4
    vote_refresh: int = 200
    knn_k: int = 10
    beta: float = 0.2
    temperature: float = 1.0
    tau: float = 0.02
    checkpoint_every: int = 0
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if self.mode not in ("geometry", "render"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclasses.dataclass
class FitResult:
    scene: ArticulatedScene
    history: list
    init_report: dict


def _logit(p):
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ParamLayout:
    """Flat parameter vector layout.

    Order: per-joint blocks for parts 1..k-1 (theta, axis, pivot,
    translation), then per-splat blocks (center, orientation, scale, opacity
    pre-activation, seg logits), then the part-model block (centers,
    orientations as rotation vectors, scale vectors).  The frozen static
    joint never appears.
    """

    def __init__(self, n, k):
        self.n = int(n)
        self.k = int(k)
        self.joint_size = 10
        self.gauss_size = 11 + self.k
        self.joint_dim = (self.k - 1) * self.joint_size
        self.gauss_dim = self.n * self.gauss_size
        self.part_dim = 9 * self.k
        self.dim = self.joint_dim + self.gauss_dim + self.part_dim

    def views(self, vec):
        """Zero-copy structured views into a flat vector."""
        j = vec[: self.joint_dim].reshape(self.k - 1, self.joint_size)
        g = vec[self.joint_dim : self.joint_dim + self.gauss_dim].reshape(self.n, self.gauss_size)
        p = vec[self.joint_dim + self.gauss_dim :]
        return {
            "theta": j[:, 0],
            "axis": j[:, 1:4],
            "pivot": j[:, 4:7],
            "trans": j[:, 7:10],
            "centers": g[:, 0:3],
            "quats": g[:, 3:7],
            "scales": g[:, 7:10],
            "opacity_raw": g[:, 10],
            "logits": g[:, 11:],
            "O": p[0 : 3 * self.k].reshape(self.k, 3),
            "w": p[3 * self.k : 6 * self.k].reshape(self.k, 3),
            "lam": p[6 * self.k :].reshape(self.k, 3),
        }

    def pack_scene(self, scene):
        vec = np.zeros(self.dim)
        v = self.views(vec)
        for j in range(1, self.k):
            joint = scene.joints[j]
            v["theta"][j - 1] = joint.theta
            v["axis"][j - 1] = joint.axis
            v["pivot"][j - 1] = joint.pivot
            v["trans"][j - 1] = joint.translation
        g = scene.gaussians
        v["centers"][:] = g.centers
        v["quats"][:] = g.quats
        v["scales"][:] = g.scales
        v["opacity_raw"][:] = _logit(g.opacities)
        v["logits"][:] = g.seg_logits
        pm = scene.part_model
        v["O"][:] = pm.centers
        for j in range(self.k):
            v["w"][j] = matrix_to_axis_angle(pm.orientations[j])
        v["lam"][:] = pm.scales
        return vec

    def scene_from(self, vec, template):
        """Materialize a validated scene from a parameter vector."""
        v = self.views(vec)
        joints = [JointParams.identity()]
        for j in range(1, self.k):
            axis = v["axis"][j - 1]
            axis = axis / np.linalg.norm(axis)
            joints.append(
                JointParams(
                    theta=float(np.clip(v["theta"][j - 1], -THETA_LIMIT, THETA_LIMIT)),
                    axis=axis,
                    pivot=v["pivot"][j - 1],
                    translation=v["trans"][j - 1],
                )
            )
        quats = v["quats"] / np.linalg.norm(v["quats"], axis=1, keepdims=True)
        gaussians = template.gaussians.replace(
            centers=v["centers"].copy(),
            quats=quats,
            scales=np.maximum(v["scales"], SCALE_FLOOR),
            opacities=_sigmoid(v["opacity_raw"]),
            seg_logits=v["logits"].copy(),
        )
        part_model = PartModel(
            centers=v["O"].copy(),
            orientations=axis_angle_to_matrix(v["w"]),
            scales=np.maximum(v["lam"], SCALE_FLOOR),
        )
        return ArticulatedScene(gaussians=gaussians, joints=tuple(joints), part_model=part_model, k=self.k)


# ---------------------------------------------------------------------------
# Forward pieces on raw parameter views.
# ---------------------------------------------------------------------------

def _joint_arrays(v, k):
    """Full per-part (including frozen part 0) theta/axis/pivot/translation."""
    theta = np.zeros(k)
    axis = np.tile(np.array([0.0, 0.0, 1.0]), (k, 1))
    pivot = np.zeros((k, 3))
    trans = np.zeros((k, 3))
    theta[1:] = v["theta"]
    norms = np.linalg.norm(v["axis"], axis=1, keepdims=True)
    axis[1:] = v["axis"] / np.maximum(norms, 1e-12)
    pivot[1:] = v["pivot"]
    trans[1:] = v["trans"]
    return theta, axis, pivot, trans


def _masks_forward(v, temperature):
    V = axis_angle_to_matrix(v["w"])
    r = v["centers"][:, None, :] - v["O"][None, :, :]
    y = np.einsum("kab,nkb->nka", V, r)
    gamma = np.einsum("nka,nka->nk", (v["lam"][None] * y), (v["lam"][None] * y))
    u = (v["logits"] - gamma) / temperature
    u = u - u.max(axis=1, keepdims=True)
    e = np.exp(u)
    m = e / e.sum(axis=1, keepdims=True)
    return {"V": V, "r": r, "y": y, "gamma": gamma, "masks": m}


def _pose_forward(v, k, t, masks):
    theta, axis, pivot, trans = _joint_arrays(v, k)
    c = 2.0 * t - 1.0
    phi = c * theta
    R = rotation_about_axis(axis, phi)
    b = pivot - np.einsum("kab,kb->ka", R, pivot) + c * trans
    per_part = np.einsum("kab,nb->nka", R, v["centers"]) + b[None]
    pos = np.einsum("nk,nka->na", masks, per_part)
    return {"c": c, "phi": phi, "axis": axis, "pivot": pivot, "R": R, "b": b, "per_part": per_part, "pos": pos}


def _quat_column_jacobian(qh, col_index):
    """d(R(q) e_c)/dq for unit quaternions, selected column per row.

    qh: (N,4) unit quaternions (w,x,y,z); col_index: (N,) in {0,1,2}.
    Returns (N,3,4).
    """
    w, x, y, z = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    zero = np.zeros_like(w)
    J0 = np.stack(
        [
            np.stack([zero, zero, -4 * y, -4 * z], axis=1),
            np.stack([2 * z, 2 * y, 2 * x, 2 * w], axis=1),
            np.stack([-2 * y, 2 * z, -2 * w, 2 * x], axis=1),
        ],
        axis=1,
    )
    J1 = np.stack(
        [
            np.stack([-2 * z, 2 * y, 2 * x, -2 * w], axis=1),
            np.stack([zero, -4 * x, zero, -4 * z], axis=1),
            np.stack([2 * x, 2 * w, 2 * z, 2 * y], axis=1),
        ],
        axis=1,
    )
    J2 = np.stack(
        [
            np.stack([2 * y, 2 * z, 2 * w, 2 * x], axis=1),
            np.stack([-2 * x, -2 * w, 2 * z, 2 * y], axis=1),
            np.stack([zero, -4 * x, -4 * y, zero], axis=1),
        ],
        axis=1,
    )
    out = np.where((col_index == 0)[:, None, None], J0, np.where((col_index == 1)[:, None, None], J1, J2))
    return out


def _rotvec_jacobians(w):
    """d exp([w]x) / dw_m for each part: shape (k, 3, 3, 3)."""
    w = np.asarray(w, dtype=np.float64)
    k = w.shape[0]
    out = np.empty((k, 3, 3, 3))
    eye = np.eye(3)
    E = np.stack([_skew(eye[m]) for m in range(3)])
    for j in range(k):
        theta2 = float(w[j] @ w[j])
        R = axis_angle_to_matrix(w[j][None])[0]
        if theta2 < 1e-14:
            out[j] = E
            continue
        for m in range(3):
            tmp = np.cross(w[j], (eye - R) @ eye[m])
            out[j, m] = ((w[j, m] * _skew(w[j]) + _skew(tmp)) / theta2) @ R
    return out


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


# ---------------------------------------------------------------------------
# Geometry-mode loss + analytic gradient.
# ---------------------------------------------------------------------------

def _chamfer_residuals(pos, target_centers, target_tree):
    n = pos.shape[0]
    m = target_centers.shape[0]
    d_pt, idx_pt = target_tree.query(pos, workers=1)
    pred_tree = cKDTree(pos)
    d_tp, idx_tp = pred_tree.query(target_centers, workers=1)
    value = 0.5 * (float(np.mean(d_pt**2)) + float(np.mean(d_tp**2)))
    G = (1.0 / n) * (pos - target_centers[idx_pt])
    back = pos[idx_tp] - target_centers
    np.add.at(G, idx_tp, back / m)
    return value, G, idx_pt


def splat_normals(quats, scales):
    """World-space shortest-axis normal per splat (unit, sign arbitrary)."""
    from .kinematics import quat_to_matrix

    qh = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    R = quat_to_matrix(qh)
    am = np.argmin(scales, axis=1)
    return R[np.arange(len(qh)), :, am]


class AlignmentTarget:
    """Per-state alignment target: splat centers with a positional KD-tree
    and a normal-augmented 6D KD-tree.

    The 6D tree pairs splats by position and surface orientation jointly, so
    splats near edges match same-face counterparts; the normal scale beta is
    tied to the median splat spacing.
    """

    def __init__(self, centers, normals):
        self.centers = np.asarray(centers, dtype=np.float64)
        self.normals = np.asarray(normals, dtype=np.float64)
        self.tree = cKDTree(self.centers)
        d, _ = self.tree.query(self.centers, k=2, workers=1)
        self.beta = 3.0 * float(np.median(d[:, 1])) if len(self.centers) > 1 else 0.1
        self.tree6 = cKDTree(np.hstack([self.centers, self.beta * self.normals]))

    @classmethod
    def from_set(cls, gaussian_set):
        return cls(gaussian_set.centers, splat_normals(gaussian_set.quats, gaussian_set.scales))

    def query_normal_pairs(self, pos, normals):
        """Sign-invariant 6D nearest neighbors: index of the target splat
        closest in (position, beta * normal), trying both normal signs."""
        qa = np.hstack([pos, self.beta * normals])
        qb = np.hstack([pos, -self.beta * normals])
        da, ia = self.tree6.query(qa, workers=1)
        db, ib = self.tree6.query(qb, workers=1)
        return np.where(da <= db, ia, ib)


def geometry_loss_grad(layout, vec, states, targets, weights, vote_state, temperature, want_grad=True):
    """Weighted geometry-mode loss and its analytic gradient.

    ``states`` lists the observation states to include (alignment averaged
    over them); ``targets`` maps state -> AlignmentTarget.  ``vote_state``
    holds frozen region vote targets.
    """
    v = layout.views(vec)
    n, k = layout.n, layout.k
    mf = _masks_forward(v, temperature)
    masks = mf["masks"]
    grad = np.zeros(layout.dim) if want_grad else None
    gv = layout.views(grad) if want_grad else None
    gm_total = np.zeros((n, k))

    qn = np.linalg.norm(v["quats"], axis=1, keepdims=True)
    qh = v["quats"] / np.maximum(qn, 1e-12)
    am = np.argmin(v["scales"], axis=1)
    from .kinematics import quat_to_matrix

    n_world = quat_to_matrix(qh)[np.arange(n), :, am]
    dn_dq = None

    # Alignment + normal compatibility over the sampled states.
    align_val = 0.0
    normal_val = 0.0
    n_states = max(len(states), 1)
    for t in states:
        target = targets[t]
        pf = _pose_forward(v, k, t, masks)
        val, G, idx_pt = _chamfer_residuals(pf["pos"], target.centers, target.tree)
        align_val += val / n_states

        # Rotated splat normals blended by the same masks; pairing is
        # normal-aware so edge splats compare against same-face targets.
        Rn = np.einsum("kab,nb->nka", pf["R"], n_world)
        u_hat = np.einsum("nk,nka->na", masks, Rn)
        un = np.linalg.norm(u_hat, axis=1, keepdims=True)
        idx_n = target.query_normal_pairs(pf["pos"], u_hat / np.maximum(un, 1e-12))
        n_star = target.normals[idx_n]
        dots = np.einsum("na,na->n", u_hat, n_star)
        normal_val += float(np.mean(1.0 - dots**2)) / n_states
        if not want_grad:
            continue

        scale = weights.render / n_states
        Gs = scale * G
        Gn = (-2.0 * weights.normal / (n_states * n)) * dots[:, None] * n_star

        gm_total += np.einsum("na,nka->nk", Gs, pf["per_part"])
        gm_total += np.einsum("na,nka->nk", Gn, Rn)
        gv["centers"] += np.einsum("nk,kba,nb->na", masks, pf["R"], Gs)

        x = v["centers"][:, None, :] - pf["pivot"][None]
        A = _skew_batch(pf["axis"])
        cphi = np.cos(pf["phi"])
        sphi = np.sin(pf["phi"])
        D = cphi[:, None, None] * A + sphi[:, None, None] * (A @ A)
        theta_g = pf["c"] * (
            np.einsum("nj,na,jab,njb->j", masks, Gs, D, x)
            + np.einsum("nj,na,jab,nb->j", masks, Gn, D, n_world)
        )
        contrib = _axis_grad_terms(x, Gs, A, sphi, cphi) + _axis_grad_terms(
            np.broadcast_to(n_world[:, None, :], x.shape), Gn, A, sphi, cphi
        )
        ga_hat = np.einsum("nj,nja->ja", masks, contrib)
        pivot_g = np.einsum("nj,na->ja", masks, Gs) - np.einsum("nj,jba,nb->ja", masks, pf["R"], Gs)
        trans_g = pf["c"] * np.einsum("nj,na->ja", masks, Gs)
        gv["theta"] += theta_g[1:]
        raw = v["axis"]
        rn = np.linalg.norm(raw, axis=1, keepdims=True)
        ahat = raw / np.maximum(rn, 1e-12)
        proj = ga_hat[1:] - ahat * np.einsum("ja,ja->j", ahat, ga_hat[1:])[:, None]
        gv["axis"] += proj / np.maximum(rn, 1e-12)
        gv["pivot"] += pivot_g[1:]
        gv["trans"] += trans_g[1:]

        # Normal-term pull on the splat orientations.
        dL_dn = np.einsum("nk,kba,nb->na", masks, pf["R"], Gn)
        if dn_dq is None:
            dn_dq = _quat_column_jacobian(qh, am)
        dL_dqh = np.einsum("na,nac->nc", dL_dn, dn_dq)
        dL_dqh -= qh * np.einsum("nc,nc->n", qh, dL_dqh)[:, None]
        gv["quats"] += dL_dqh / np.maximum(qn, 1e-12)

    # Planar scale term.
    scale_val = float(np.mean(np.min(v["scales"], axis=1)))
    if want_grad and weights.scale != 0.0:
        amin = np.argmin(v["scales"], axis=1)
        gv["scales"][np.arange(n), amin] += weights.scale / n

    # Part-center regularization.
    labels = np.argmax(masks, axis=1)
    used = []
    diffs = np.zeros((k, 3))
    counts = np.zeros(k, dtype=np.intp)
    for j in range(k):
        member = labels == j
        cnt = int(member.sum())
        if cnt == 0:
            continue
        used.append(j)
        counts[j] = cnt
        diffs[j] = v["O"][j] - v["centers"][member].mean(axis=0)
    center_val = float(np.mean([diffs[j] @ diffs[j] for j in used])) if used else 0.0
    if want_grad and used and weights.center != 0.0:
        cscale = weights.center * 2.0 / len(used)
        for j in used:
            gv["O"][j] += cscale * diffs[j]
            member = labels == j
            gv["centers"][member] -= cscale * diffs[j] / counts[j]

    # Frozen-target vote term.
    vote_val = 0.0
    if vote_state:
        floor = segmentation.PROB_FLOOR
        n_regions = len(vote_state)
        for members, target in vote_state:
            mm = np.maximum(masks[members], floor)
            tt = np.maximum(target, floor)
            kl = np.sum(target[None, :] * (np.log(tt)[None, :] - np.log(mm)), axis=1)
            vote_val += float(kl.mean()) / n_regions
            if want_grad and weights.vote != 0.0:
                g = np.where(masks[members] > floor, -target[None, :] / mm, 0.0)
                gm_total[members] += weights.vote * g / (n_regions * members.size)

    if want_grad:
        # One softmax chain for all mask-gradient sources.
        gu = masks * (gm_total - np.einsum("nk,nk->n", gm_total, masks)[:, None])
        gv["logits"] += gu / temperature
        ggamma = -gu / temperature
        V = mf["V"]
        w2 = (v["lam"] ** 2)[None] * mf["y"]
        VTw2 = np.einsum("kba,nkb->nka", V, w2)
        gv["centers"] += 2.0 * np.einsum("nk,nka->na", ggamma, VTw2)
        gv["O"] -= 2.0 * np.einsum("nk,nka->ka", ggamma, VTw2)
        gv["lam"] += 2.0 * np.einsum("nk,nka->ka", ggamma, v["lam"][None] * mf["y"] ** 2)
        M = 2.0 * np.einsum("nk,nka,nkb->kab", ggamma, w2, mf["r"])
        dV = _rotvec_jacobians(v["w"])
        gv["w"] += np.einsum("kmab,kab->km", dV, M)

    terms = {
        "render": align_val,
        "scale": scale_val,
        "center": center_val,
        "geo": 0.0,
        "vote": vote_val,
        "normal": normal_val,
    }
    report = LossReport.build(terms, weights)
    return report, grad


def _axis_grad_terms(x, G, A, sphi, cphi):
    """Per-splat, per-part contribution of G^T dR/da_hat x (see the
    Rodrigues expansion): sin(phi) (x cross G) + (1 - cos(phi))
    ((A x) cross G - x cross (A G))."""
    Ax = np.einsum("jab,njb->nja", A, x)
    AG = np.einsum("jab,nb->nja", A, G)
    cross1 = np.cross(x, G[:, None, :])
    cross2 = np.cross(Ax, G[:, None, :])
    cross3 = np.cross(x, AG)
    return sphi[None, :, None] * cross1 + (1.0 - cphi)[None, :, None] * (cross2 - cross3)


def _skew_batch(vs):
    out = np.zeros((vs.shape[0], 3, 3))
    out[:, 0, 1] = -vs[:, 2]
    out[:, 0, 2] = vs[:, 1]
    out[:, 1, 0] = vs[:, 2]
    out[:, 1, 2] = -vs[:, 0]
    out[:, 2, 0] = -vs[:, 1]
    out[:, 2, 1] = vs[:, 0]
    return out


# ---------------------------------------------------------------------------
# Render-mode loss (finite differences on joint / part-model blocks).
# ---------------------------------------------------------------------------

def _posed_gaussian_set(layout, vec, t, temperature, template):
    v = layout.views(vec)
    mf = _masks_forward(v, temperature)
    pf = _pose_forward(v, layout.k, t, mf["masks"])
    quats = v["quats"] / np.linalg.norm(v["quats"], axis=1, keepdims=True)
    from .kinematics import blend_quaternions, quat_at

    joints = []
    theta, axis, pivot, trans = _joint_arrays(v, layout.k)
    c = 2.0 * t - 1.0
    half = 0.5 * c * theta
    jq = np.concatenate([np.cos(half)[:, None], axis * np.sin(half)[:, None]], axis=1)
    bq = blend_quaternions(mf["masks"], jq, quats)
    centers = pf["pos"] if c != 0.0 else v["centers"].copy()
    gs = GaussianSet(
        centers=centers,
        quats=bq if c != 0.0 else quats,
        scales=np.maximum(v["scales"], SCALE_FLOOR),
        opacities=_sigmoid(v["opacity_raw"]),
        colors=template.gaussians.colors,
        seg_logits=v["logits"].copy(),
    )
    return gs, mf["masks"]


def render_mode_value(layout, vec, observations, weights, temperature, template, star_cache=None):
    """Photometric + consistency value over all views (render mode)."""
    render_vals = []
    geo_vals = []
    for obs in observations:
        view_r = []
        view_g = []
        posed, masks = _posed_gaussian_set(layout, vec, obs.t, temperature, template)
        for vi, (cam, img) in enumerate(obs.views):
            maps_t0 = render_gaussians(posed, cam, masks=masks)
            view_r.append(l_render(maps_t0.color, img, lambda_dssim=weights.dssim))
            if obs.t in (0.0, 1.0):
                key = (id(cam), vi)
                if star_cache is not None and key in star_cache:
                    maps_star = star_cache[key]
                else:
                    star_posed, star_masks = _posed_gaussian_set(layout, vec, 0.5, temperature, template)
                    maps_star = render_gaussians(star_posed, cam, masks=star_masks)
                    if star_cache is not None:
                        star_cache[key] = maps_star
                view_g.append(
                    l_geo(None, cam, obs.t, target_image=img, maps_t0=maps_t0, maps_star=maps_star)
                )
        if view_r:
            render_vals.append(float(np.mean(view_r)))
        if view_g:
            geo_vals.append(float(np.mean(view_g)))
    render_term = float(np.mean(render_vals)) if render_vals else 0.0
    geo_term = float(np.mean(geo_vals)) if geo_vals else 0.0
    return render_term, geo_term


def _fd_coords(layout):
    idx = list(range(layout.joint_dim))
    start = layout.joint_dim + layout.gauss_dim
    idx.extend(range(start, layout.dim))
    return np.asarray(idx, dtype=np.intp)


def render_mode_grad(layout, vec, observations, weights, temperature, template, fd_step):
    """Central-difference gradient of weighted render-mode terms, restricted
    to the joint and part-model parameter blocks."""
    coords = _fd_coords(layout)
    grad = np.zeros(layout.dim)
    star_cache = {}

    def value_at(vp):
        r, g = render_mode_value(layout, vp, observations, weights, temperature, template, star_cache)
        return weights.render * r + weights.geo * g

    for c in coords:
        h = fd_step * max(1.0, abs(vec[c]))
        vp = vec.copy()
        vp[c] = vec[c] + h
        f_plus = value_at(vp)
        vp[c] = vec[c] - h
        f_minus = value_at(vp)
        grad[c] = (f_plus - f_minus) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# Public gradient contract, Adam step, fit loop.
# ---------------------------------------------------------------------------

def _vote_refresh(layout, vec, knn_k, beta, temperature, seed):
    v = layout.views(vec)
    masks = _masks_forward(v, temperature)["masks"]
    centers = v["centers"]
    n = centers.shape[0]
    if n < knn_k + 1:
        return []
    labels = np.argmax(masks, axis=1)
    tree = cKDTree(centers)
    _, nbr = tree.query(centers, k=knn_k + 1, workers=1)
    frac = np.mean(labels[nbr[:, 1:]] != labels[:, None], axis=1)
    idx = np.flatnonzero(frac >= beta)
    if idx.size == 0:
        return []
    regions = segmentation.vote_regions(centers[idx], layout.k, seed=seed)
    boundary = segmentation.BoundarySet(indices=idx, regions=regions)
    return segmentation.region_votes(centers, masks, boundary)


def gradients(scene, observations, weights=None, mode="geometry", temperature=1.0,
              fd_step=1e-4, vote_state=None, knn_k=10, beta=0.2, vote_seed=0):
    """Gradient of the weighted total objective as a flat parameter vector.

    Hybrid contract: analytic chain-rule gradients for the geometry-mode
    terms; central finite differences (restricted to joint and part-model
    blocks) for the render-based terms.  Raises on non-finite results.
    """
    weights = weights or LossWeights()
    layout = ParamLayout(len(scene.gaussians), scene.k)
    vec = layout.pack_scene(scene)
    if vote_state is None:
        vote_state = _vote_refresh(layout, vec, knn_k, beta, temperature, vote_seed)
    if mode == "geometry":
        targets = {}
        states = []
        for obs in sorted(observations, key=lambda o: o.t):
            if obs.gaussian_set is None:
                raise ValueError(f"geometry mode needs a target gaussian_set at t={obs.t}")
            targets[obs.t] = AlignmentTarget.from_set(obs.gaussian_set)
            states.append(obs.t)
        report, grad = geometry_loss_grad(layout, vec, states, targets, weights, vote_state, temperature)
    elif mode == "render":
        _, grad = geometry_loss_grad(layout, vec, [], {}, weights, vote_state, temperature)
        grad += render_mode_grad(layout, vec, list(observations), weights, temperature, scene, fd_step)
        report = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not np.all(np.isfinite(grad)):
        raise RuntimeError("non-finite gradient")
    return grad, report, layout


class AdamState:
    """First-order adaptive-moment state (beta 0.9/0.999, eps 1e-8)."""

    def __init__(self, dim, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def update(self, vec, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        vec -= lr * mhat / (np.sqrt(vhat) + self.eps)


def _project(layout, vec):
    """Post-step renormalizations: unit axes/quaternions, theta clamp,
    scale floors."""
    v = layout.views(vec)
    norms = np.linalg.norm(v["axis"], axis=1, keepdims=True)
    v["axis"][:] = v["axis"] / np.maximum(norms, 1e-12)
    np.clip(v["theta"], -THETA_LIMIT, THETA_LIMIT, out=v["theta"])
    qn = np.linalg.norm(v["quats"], axis=1, keepdims=True)
    v["quats"][:] = v["quats"] / np.maximum(qn, 1e-12)
    np.maximum(v["scales"], SCALE_FLOOR, out=v["scales"])
    np.maximum(v["lam"], SCALE_FLOOR, out=v["lam"])


def _lr_vector(layout, config):
    lr = np.empty(layout.dim)
    v = layout.views(lr)
    for key in ("theta", "axis", "pivot", "trans"):
        v[key][:] = config.lr_joints
    v["centers"][:] = config.lr_gaussians
    v["quats"][:] = config.lr_gaussians
    v["scales"][:] = config.lr_gaussians
    v["opacity_raw"][:] = config.lr_gaussians
    v["logits"][:] = config.lr_logits
    v["O"][:] = config.lr_joints
    v["w"][:] = config.lr_joints
    v["lam"][:] = config.lr_joints
    return lr


def step(scene, grad, lr=1e-3, adam=None):
    """Single optimizer step on a scene; returns the updated scene.

    Convenience wrapper over the in-place fit-loop update: adaptive-moment
    step followed by the documented renormalizations.
    """
    layout = ParamLayout(len(scene.gaussians), scene.k)
    vec = layout.pack_scene(scene)
    if adam is None:
        adam = AdamState(layout.dim)
    adam.update(vec, np.asarray(grad, dtype=np.float64), lr)
    _project(layout, vec)
    return layout.scene_from(vec, scene), adam


def _dump_params(vec):
    tmp = tempfile.NamedTemporaryFile(prefix="artikin_params_", suffix=".npy", delete=False)
    np.save(tmp, vec)
    return tmp.name


def fit(two_state_input, k=None, config=None, observations=None, loss_log=None, checkpoint_dir=None):
    """Run initialization and the optimization loop on two-state input.

    Geometry mode (the default) aligns posed splat centers to the per-state
    splat sets; render mode additionally needs image ``observations``
    (StateObservation with views).  Deterministic for a given config/seed.
    Returns a :class:`FitResult` with the fitted scene, per-iteration loss
    history, and the init report.
    """
    if config is None:
        config = FitConfig(k=k or 2)
    if k is not None:
        config.k = k
    if not isinstance(two_state_input, TwoStateInput):
        raise TypeError("expected TwoStateInput")
    if config.mode == "render" and not observations:
        raise ValueError("render mode needs image observations")

    scene0, init_report = initialize_scene(
        two_state_input, config.k, seed=config.seed, knn_k=config.knn_k, beta=config.beta
    )
    layout = ParamLayout(len(scene0.gaussians), config.k)
    vec = layout.pack_scene(scene0)
    rng = np.random.default_rng(config.seed)
    adam = AdamState(layout.dim)
    lr_vec = _lr_vector(layout, config)

    geom_obs = [
        _GeomObs(0.0, two_state_input.gaussians_t0),
        _GeomObs(1.0, two_state_input.gaussians_t1),
    ]
    targets = {o.t: AlignmentTarget.from_set(o.gaussian_set) for o in geom_obs}
    if config.mode == "render":
        states = sorted({o.t for o in observations})
    else:
        states = sorted(targets)

    history = []
    vote_state = []
    log_fh = open(loss_log, "w") if loss_log else None
    try:
        for it in range(config.iterations):
            if config.vote_refresh > 0 and it % config.vote_refresh == 0:
                vote_state = _vote_refresh(
                    layout, vec, config.knn_k, config.beta, config.temperature, config.seed
                )
            if config.mode == "geometry":
                # Both states every iteration: the per-state translation
                # gradients carry opposite time factors and must cancel
                # jointly, which per-state sampling turns into a random walk.
                report, grad = geometry_loss_grad(
                    layout, vec, states, targets, config.weights, vote_state, config.temperature
                )
            else:
                t = states[int(rng.integers(len(states)))]
                report, grad = geometry_loss_grad(
                    layout, vec, [], {}, config.weights, vote_state, config.temperature
                )
                sampled = [o for o in observations if o.t == t]
                grad = grad + render_mode_grad(
                    layout, vec, sampled, config.weights, config.temperature, scene0, config.fd_step
                )
                render_term, geo_term = render_mode_value(
                    layout, vec, sampled, config.weights, config.temperature, scene0
                )
                terms = dict(report.terms)
                terms["render"] = render_term
                terms["geo"] = geo_term
                report = LossReport.build(terms, config.weights)
            if not np.all(np.isfinite(grad)):
                path = _dump_params(vec)
                raise RuntimeError(f"non-finite gradient at iteration {it}; parameters dumped to {path}")
            sched = 0.5 * (1.0 + np.cos(np.pi * it / max(config.iterations, 1)))
            adam.update(vec, grad, lr_vec * sched)
            _project(layout, vec)
            history.append(report)
            if log_fh is not None:
                log_fh.write(json.dumps({"iteration": it, **report.to_dict()}) + "\n")
            if (
                checkpoint_dir is not None
                and config.checkpoint_every > 0
                and (it + 1) % config.checkpoint_every == 0
            ):
                from . import io as scene_io
                from pathlib import Path

                ck = Path(checkpoint_dir)
                ck.mkdir(parents=True, exist_ok=True)
                scene_io.save_scene(layout.scene_from(vec, scene0), ck / f"checkpoint_{it + 1:06d}.ply")
    finally:
        if log_fh is not None:
            log_fh.close()

    from .kinematics import canonicalize_joint

    scene = layout.scene_from(vec, scene0)
    # Pin the redundant (pivot, translation) decomposition to the motion's
    # screw axis; the state-0/1 poses are unchanged.
    joints = tuple(j if i == 0 else canonicalize_joint(j) for i, j in enumerate(scene.joints))
    return FitResult(scene=scene.replace(joints=joints), history=history, init_report=init_report)


@dataclasses.dataclass(frozen=True)
class _GeomObs:
    t: float
    gaussian_set: GaussianSet
