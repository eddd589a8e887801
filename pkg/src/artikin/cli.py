"""Batch command-line front end.

Subcommands: gen | fit | eval | mesh | render.  Flags mirror the config JSON
one-to-one; values from --config are applied first and explicit flags win.
Verbosity comes from the ARTIKIN_LOG environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

logger = logging.getLogger("artikin.cli")


def _setup_logging():
    level = os.environ.get("ARTIKIN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _load_config(args):
    from .optimizer import FitConfig

    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        data = json.loads(path.read_text())
    for key in ("k", "mode", "iterations", "seed", "threads"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    return FitConfig.from_dict(data)


def cmd_gen(args):
    from . import io as scene_io
    from .synthetic import make_scene

    spec = {}
    if args.spec:
        spec = json.loads(Path(args.spec).read_text())
    for key, val in (
        ("kind", args.kind),
        ("k", args.k),
        ("theta_total_deg", args.theta),
        ("translation", args.translation),
        ("noise", args.noise),
        ("n_gaussians", args.n_gaussians),
        ("seed", args.seed),
    ):
        if val is not None:
            spec[key] = val
    spec.setdefault("kind", "hinge")
    spec.setdefault("seed", 0)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tsi, gt = make_scene(**spec)
    scene_io.save_gaussian_set(tsi.gaussians_t0, out / "state_0.ply")
    scene_io.save_gaussian_set(tsi.gaussians_t1, out / "state_1.ply")
    (out / "ground_truth.json").write_text(json.dumps(gt.to_dict()))
    (out / "gen_spec.json").write_text(json.dumps(spec, indent=2))
    print(f"wrote {out / 'state_0.ply'}, {out / 'state_1.ply'}, {out / 'ground_truth.json'}")
    return 0


def cmd_fit(args):
    from . import io as scene_io
    from .initialization import TwoStateInput
    from .optimizer import fit

    config = _load_config(args)
    in_dir = Path(args.input)
    p0, p1 = in_dir / "state_0.ply", in_dir / "state_1.ply"
    for p in (p0, p1):
        if not p.exists():
            raise FileNotFoundError(f"missing state file: {p}")
    tsi = TwoStateInput(
        gaussians_t0=scene_io.load_gaussian_set(p0),
        gaussians_t1=scene_io.load_gaussian_set(p1),
        tau=config.tau,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = fit(
        tsi,
        config=config,
        loss_log=str(out / "history.jsonl"),
        checkpoint_dir=str(out) if config.checkpoint_every > 0 else None,
    )
    scene_io.save_scene(result.scene, out / "scene.ply")
    (out / "init_report.json").write_text(json.dumps(result.init_report, indent=2))
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    final = result.history[-1].to_dict() if result.history else {}
    (out / "final_loss.json").write_text(json.dumps(final, indent=2))
    print(f"fit complete: {out / 'scene.ply'} ({config.iterations} iterations)")
    return 0


def _eval_metrics(scene, gt, temperature=1.0):
    from .kinematics import transform_scene
    from .metrics import (
        align_labels,
        axis_angle_error,
        axis_pos_error,
        chamfer,
        part_motion_error,
    )
    from .scene import JointParams
    from .segmentation import scene_masks
    from scipy.spatial import cKDTree

    masks = scene_masks(scene, temperature=temperature)
    pred_labels = np.argmax(masks, axis=1)

    # Transfer ground-truth labels to canonical splats at the half pose.
    gt_pts, gt_labels = gt.points_at(0.5)
    _, nn = cKDTree(gt_pts).query(scene.gaussians.centers, workers=1)
    gt_on_splats = gt_labels[nn]
    agreement_raw, mapping = _label_agreement(pred_labels, gt_on_splats, scene.k)

    per_joint = []
    for part in range(1, scene.k):
        gt_part = mapping.get(part, part)
        if gt_part == 0:
            continue
        gt_joint = gt.joint_for_part(gt_part)
        joint = scene.joints[part]
        entry = {"part": part, "gt_part": gt_part, "kind": gt_joint.kind}
        entry["axis_ang_deg"] = axis_angle_error(joint.axis, gt_joint.axis)
        if gt_joint.kind != "prismatic":
            entry["axis_pos_cm"] = axis_pos_error(joint.axis, joint.pivot, gt_joint.axis, gt_joint.pivot)
        rot, trans = part_motion_error(joint, gt_joint.axis, gt_joint.rotation_deg, gt_joint.translation)
        entry["part_motion"] = {"rot_deg": rot, "trans": trans}
        per_joint.append(entry)

    # Point-level Chamfer against noise-free ground truth at both states.
    cd = {}
    for state in (0.0, 1.0):
        posed = transform_scene(scene, state, masks=masks)
        gt_state_pts, gt_state_labels = gt.points_at(state)
        static_pred = posed.centers[pred_labels == mapping.get(0, 0)] if (pred_labels == 0).any() else posed.centers
        cd[f"cd_s_t{state:g}"] = chamfer(static_pred, gt_state_pts[gt_state_labels == 0])
        cd[f"cd_w_t{state:g}"] = chamfer(posed.centers, gt_state_pts)
    report = {
        "label_agreement": agreement_raw,
        "joints": per_joint,
        "chamfer": cd,
    }
    return report


def _label_agreement(pred, gt, k):
    from .metrics import label_agreement

    return label_agreement(pred, gt, k)


def cmd_eval(args):
    from . import io as scene_io
    from .synthetic import GroundTruth

    scene = scene_io.load_scene(Path(args.scene))
    gt = GroundTruth.from_dict(json.loads(Path(args.gt).read_text()))
    report = _eval_metrics(scene, gt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return 0


def cmd_mesh(args):
    from . import io as scene_io
    from .meshing import extract_part_meshes

    scene = scene_io.load_scene(Path(args.scene))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    states = [float(t) for t in args.t]
    for t in states:
        parts, whole = extract_part_meshes(scene, t=t, voxel=args.voxel)
        for j, mesh in parts.items():
            scene_io.write_obj(mesh, out / f"part_{j}_t{t:g}.obj")
        scene_io.write_obj(whole, out / f"whole_t{t:g}.obj")
        print(f"state {t:g}: {len(parts)} part meshes + whole mesh")
    return 0


def cmd_render(args):
    from . import io as scene_io
    from .renderer import render

    scene = scene_io.load_scene(Path(args.scene))
    cameras = scene_io.load_cameras(Path(args.cameras))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t = float(args.t)
    for vi, cam in enumerate(cameras):
        maps = render(scene, cam, t)
        seg_id = np.argmax(maps.seg, axis=2).astype(np.float64)
        channels = {
            "color": maps.color,
            "alpha": maps.alpha,
            "dist": maps.distance,
            "depth": maps.depth,
            "normal": maps.normal,
            "seg": seg_id,
        }
        for name, data in channels.items():
            scene_io.write_pfm(out / f"{t:g}_{vi}_{name}.pfm", data)
            tone = data
            if name == "normal":
                tone = (data + 1.0) / 2.0
            elif name in ("depth", "dist"):
                span = np.abs(data).max()
                tone = np.abs(data) / span if span > 0 else data
            elif name == "seg":
                tone = data / max(scene.k - 1, 1)
            scene_io.write_png(out / f"{t:g}_{vi}_{name}.png", tone)
    print(f"rendered {len(cameras)} views at t={t:g} into {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="artikin", description="Articulated-object reconstruction from two states")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic two-state scene with ground truth")
    p.add_argument("--spec", help="scene spec JSON file")
    p.add_argument("--kind", choices=("hinge", "drawer", "screw", "cabinet"))
    p.add_argument("--k", type=int)
    p.add_argument("--theta", type=float, help="total rotation, degrees")
    p.add_argument("--translation", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--n-gaussians", type=int, dest="n_gaussians")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit", help="fit joints, masks, and splats to two-state input")
    p.add_argument("--input", required=True, help="directory with state_0.ply / state_1.ply")
    p.add_argument("--config", help="config JSON")
    p.add_argument("--k", type=int)
    p.add_argument("--mode", choices=("geometry", "render"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="score a fitted scene against ground truth")
    p.add_argument("--scene", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mesh", help="extract part-level meshes at given states")
    p.add_argument("--scene", required=True)
    p.add_argument("--t", nargs="+", default=["0.5"], help="states to mesh")
    p.add_argument("--voxel", type=float, default=0.04)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("render", help="render per-channel maps at a state")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True, help="camera JSON file")
    p.add_argument("--t", default="0.5")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
