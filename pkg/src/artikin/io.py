"""Serialization: splat sets as binary PLY, scene metadata as sidecar JSON,
cameras as JSON, float maps as PFM, tonemapped maps as PNG, meshes as OBJ.

Splat PLY schema (binary little-endian, double precision): per-vertex
x, y, z, quat_w/x/y/z, scale_x/y/z, opacity, r, g, b, seg_logit_0..k-1.
The scene sidecar holds k, the joints, and the part model.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .scene import ArticulatedScene, Camera, GaussianSet, JointParams, PartModel, SceneError

__all__ = [
    "save_gaussian_set",
    "load_gaussian_set",
    "save_scene",
    "load_scene",
    "save_cameras",
    "load_cameras",
    "save_point_cloud",
    "load_point_cloud",
    "export_labeled_ply",
    "write_pfm",
    "read_pfm",
    "write_png",
    "write_obj",
]

_BASE_FIELDS = [
    "x", "y", "z",
    "quat_w", "quat_x", "quat_y", "quat_z",
    "scale_x", "scale_y", "scale_z",
    "opacity",
    "r", "g", "b",
]

_PLY_TYPES = {
    "double": ("<f8", 8),
    "float": ("<f4", 4),
    "float64": ("<f8", 8),
    "float32": ("<f4", 4),
    "uchar": ("<u1", 1),
    "uint8": ("<u1", 1),
    "int": ("<i4", 4),
    "int32": ("<i4", 4),
}


def _write_ply(path, names, columns):
    n = columns[0].shape[0]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property double {name}" for name in names]
    header.append("end_header")
    data = np.column_stack(columns).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def _read_ply(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise SceneError(str(path), "not a PLY file")
        fmt = fh.readline().strip()
        if b"binary_little_endian" not in fmt:
            raise SceneError(str(path), f"unsupported PLY format: {fmt.decode(errors='replace')}")
        n = None
        props = []
        while True:
            line = fh.readline()
            if not line:
                raise SceneError(str(path), "truncated PLY header")
            line = line.strip().decode("ascii", errors="replace")
            if line.startswith("comment"):
                continue
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("element"):
                raise SceneError(str(path), f"unsupported element: {line}")
            elif line.startswith("property"):
                _, ptype, pname = line.split()
                if ptype not in _PLY_TYPES:
                    raise SceneError(str(path), f"unsupported property type {ptype}")
                props.append((pname, ptype))
            elif line == "end_header":
                break
        if n is None:
            raise SceneError(str(path), "PLY header lacks a vertex element")
        dtype = np.dtype([(name, _PLY_TYPES[ptype][0]) for name, ptype in props])
        buf = fh.read(dtype.itemsize * n)
        if len(buf) != dtype.itemsize * n:
            raise SceneError(str(path), "truncated PLY payload")
        rec = np.frombuffer(buf, dtype=dtype)
    return {name: np.asarray(rec[name], dtype=np.float64) for name, _ in props}


def save_gaussian_set(gaussians, path):
    """Write a splat set to binary PLY."""
    k = gaussians.n_channels
    names = list(_BASE_FIELDS) + [f"seg_logit_{i}" for i in range(k)]
    cols = [
        gaussians.centers[:, 0], gaussians.centers[:, 1], gaussians.centers[:, 2],
        gaussians.quats[:, 0], gaussians.quats[:, 1], gaussians.quats[:, 2], gaussians.quats[:, 3],
        gaussians.scales[:, 0], gaussians.scales[:, 1], gaussians.scales[:, 2],
        gaussians.opacities,
        gaussians.colors[:, 0], gaussians.colors[:, 1], gaussians.colors[:, 2],
    ]
    cols += [gaussians.seg_logits[:, i] for i in range(k)]
    _write_ply(path, names, cols)


def load_gaussian_set(path):
    """Read a splat set; quaternions are renormalized on load."""
    fields = _read_ply(path)
    for name in _BASE_FIELDS:
        if name not in fields:
            raise SceneError(f"{path}:{name}", "missing required property")
    logit_names = sorted(
        (name for name in fields if name.startswith("seg_logit_")),
        key=lambda s: int(s.rsplit("_", 1)[1]),
    )
    if not logit_names:
        raise SceneError(str(path), "no seg_logit_* properties")
    centers = np.column_stack([fields["x"], fields["y"], fields["z"]])
    quats = np.column_stack([fields[f"quat_{c}"] for c in "wxyz"])
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    if np.any(norms < 1e-9):
        raise SceneError(f"{path}:quat", "zero-norm quaternion")
    quats = quats / norms
    return GaussianSet(
        centers=centers,
        quats=quats,
        scales=np.column_stack([fields[f"scale_{c}"] for c in "xyz"]),
        opacities=fields["opacity"],
        colors=np.column_stack([fields[c] for c in "rgb"]),
        seg_logits=np.column_stack([fields[name] for name in logit_names]),
    )


def _sidecar(path):
    path = Path(path)
    return path.with_suffix(".json")


def save_scene(scene, path):
    """Write a scene: splats to PLY, metadata (k, joints, part model) to a
    sidecar JSON next to it."""
    path = Path(path)
    save_gaussian_set(scene.gaussians, path)
    meta = {
        "k": scene.k,
        "joints": [
            {
                "theta": j.theta,
                "axis": j.axis.tolist(),
                "pivot": j.pivot.tolist(),
                "translation": j.translation.tolist(),
            }
            for j in scene.joints
        ],
        "part_model": {
            "centers": scene.part_model.centers.tolist(),
            "orientations": scene.part_model.orientations.tolist(),
            "scales": scene.part_model.scales.tolist(),
        },
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2))


def load_scene(path):
    """Read a scene written by :func:`save_scene`; all invariants are
    validated and axes/quaternions renormalized."""
    path = Path(path)
    gaussians = load_gaussian_set(path)
    sidecar = _sidecar(path)
    if not sidecar.exists():
        raise SceneError(str(sidecar), "missing scene sidecar JSON")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(str(sidecar), f"malformed JSON: {exc}") from exc
    try:
        k = int(meta["k"])
        joints = []
        for idx, jd in enumerate(meta["joints"]):
            axis = np.asarray(jd["axis"], dtype=np.float64)
            norm = np.linalg.norm(axis)
            if norm < 1e-9:
                raise SceneError(f"joints[{idx}].axis", "zero-norm axis")
            joints.append(
                JointParams(
                    theta=float(jd["theta"]),
                    axis=axis / norm,
                    pivot=jd["pivot"],
                    translation=jd["translation"],
                )
            )
        pm = meta["part_model"]
        part_model = PartModel(
            centers=np.asarray(pm["centers"], dtype=np.float64),
            orientations=np.asarray(pm["orientations"], dtype=np.float64),
            scales=np.asarray(pm["scales"], dtype=np.float64),
        )
    except KeyError as exc:
        raise SceneError(str(sidecar), f"missing field {exc}") from exc
    return ArticulatedScene(gaussians=gaussians, joints=tuple(joints), part_model=part_model, k=k)


def save_cameras(cameras, path):
    """Write cameras as a JSON list of {K (9 floats, row-major), pose
    (12 floats, row-major [R|t]), width, height}."""
    out = []
    for cam in cameras:
        pose = np.column_stack([cam.rotation, cam.translation])
        out.append(
            {
                "K": cam.K.reshape(-1).tolist(),
                "pose": pose.reshape(-1).tolist(),
                "width": cam.width,
                "height": cam.height,
            }
        )
    Path(path).write_text(json.dumps(out, indent=2))


def load_cameras(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(str(path), f"malformed camera JSON: {exc}") from exc
    cams = []
    for idx, cd in enumerate(data):
        try:
            K = np.asarray(cd["K"], dtype=np.float64).reshape(3, 3)
            pose = np.asarray(cd["pose"], dtype=np.float64).reshape(3, 4)
            cams.append(
                Camera(
                    K=K,
                    rotation=pose[:, :3],
                    translation=pose[:, 3],
                    width=int(cd["width"]),
                    height=int(cd["height"]),
                )
            )
        except (KeyError, ValueError) as exc:
            raise SceneError(f"{path}[{idx}]", f"bad camera entry: {exc}") from exc
    return cams


def save_point_cloud(points, normals, path):
    """Oriented point cloud as binary PLY (x, y, z, nx, ny, nz)."""
    names = ["x", "y", "z", "nx", "ny", "nz"]
    cols = [points[:, 0], points[:, 1], points[:, 2], normals[:, 0], normals[:, 1], normals[:, 2]]
    _write_ply(path, names, cols)


def load_point_cloud(path):
    fields = _read_ply(path)
    for name in ("x", "y", "z", "nx", "ny", "nz"):
        if name not in fields:
            raise SceneError(f"{path}:{name}", "missing required property")
    pts = np.column_stack([fields["x"], fields["y"], fields["z"]])
    nrm = np.column_stack([fields["nx"], fields["ny"], fields["nz"]])
    return pts, nrm


def export_labeled_ply(centers, labels, path):
    """Centers with an integer part id per vertex, for visualization."""
    names = ["x", "y", "z", "part"]
    cols = [centers[:, 0], centers[:, 1], centers[:, 2], np.asarray(labels, dtype=np.float64)]
    _write_ply(path, names, cols)


def write_pfm(path, data):
    """Write a float map as PFM (grayscale Pf or color PF, little-endian)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = "Pf"
        payload = data[::-1]
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
        payload = data[::-1]
    else:
        raise ValueError(f"PFM supports HxW or HxWx3 arrays, got {data.shape}")
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{data.shape[1]} {data.shape[0]}\n-1.0\n".encode("ascii"))
        fh.write(payload.astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        header = fh.readline().strip().decode("ascii")
        if header not in ("Pf", "PF"):
            raise ValueError(f"not a PFM file: {header}")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        count = w * h * (3 if header == "PF" else 1)
        data = np.frombuffer(fh.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
    shape = (h, w, 3) if header == "PF" else (h, w)
    return np.asarray(data.reshape(shape)[::-1], dtype=np.float64)


def write_png(path, data):
    """Tonemap [0, 1] data to 8-bit PNG (grayscale or RGB)."""
    from PIL import Image

    arr = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    img = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img).save(path)


def write_obj(mesh, path):
    """Triangle mesh as Wavefront OBJ (1-based indices)."""
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")
