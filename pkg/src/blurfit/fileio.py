"""On-disk formats: PNG images, Wavefront OBJ meshes, JSON manifests and
CSV logs, plus the directory layouts for synthetic instances and fit
results."""

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .blur import MotionState
from .camera import Camera
from .mesh import TexturedMesh


def save_png(path, array):
    """Write a [0, 1] float array (H,W) or (H,W,3) as an 8-bit PNG."""
    arr = np.asarray(array, dtype=np.float64)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path)


def load_png(path, grayscale=False):
    img = Image.open(path)
    img = img.convert("L" if grayscale else "RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Wavefront OBJ with per-corner texture coordinates

def save_obj(path, mesh, texture_path=None):
    """Write v/vt/f lines (triangles, 1-based indices) and the texture PNG
    next to the OBJ unless a texture path is given."""
    path = Path(path)
    texture_path = Path(texture_path) if texture_path else path.with_suffix(".png")
    lines = [f"# {mesh.name}: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for face_uv in mesh.uv:
        for u in face_uv:
            lines.append(f"vt {u[0]:.9g} {u[1]:.9g}")
    for fi, face in enumerate(mesh.faces):
        t = 3 * fi + 1
        lines.append(f"f {face[0] + 1}/{t} {face[1] + 1}/{t + 1} {face[2] + 1}/{t + 2}")
    path.write_text("\n".join(lines) + "\n")
    save_png(texture_path, mesh.texture)


def load_obj(path, texture_path=None, name=None):
    """Read a triangulated OBJ (v/vt/f); rejects faces that are not triangles."""
    path = Path(path)
    verts, vts, faces, face_uv_idx = [], [], [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            vts.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            refs = parts[1:]
            if len(refs) != 3:
                raise ValueError(f"non-triangulated face with {len(refs)} corners")
            vi, ti = [], []
            for ref in refs:
                fields = ref.split("/")
                vi.append(int(fields[0]) - 1)
                ti.append(int(fields[1]) - 1 if len(fields) > 1 and fields[1] else -1)
            faces.append(vi)
            face_uv_idx.append(ti)
    faces = np.asarray(faces, dtype=np.int64)
    if len(vts):
        vts = np.asarray(vts, dtype=np.float64)
        uv = np.stack([[vts[t] if t >= 0 else np.zeros(2) for t in tri]
                       for tri in face_uv_idx])
    else:
        uv = np.zeros((len(faces), 3, 2))
    texture_path = Path(texture_path) if texture_path else path.with_suffix(".png")
    texture = load_png(texture_path) if texture_path.exists() \
        else np.full((4, 4, 3), 0.5)
    return TexturedMesh(vertices=np.asarray(verts), faces=faces, uv=uv,
                        texture=texture, name=name or path.stem)


# ---------------------------------------------------------------------------
# loss history CSV

LOSS_COLUMNS = ["iter", "l_image", "l_silhouette", "l_tv", "l_laplacian", "total"]


def save_loss_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        for i, entry in enumerate(history):
            writer.writerow([i, repr(entry.l_image), repr(entry.l_silhouette),
                             repr(entry.l_tv), repr(entry.l_laplacian),
                             repr(entry.total)])


def load_loss_history(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "iter" else float(v))
                         for k, v in row.items()})
    return rows


# ---------------------------------------------------------------------------
# synthetic instance directory layout

def save_instance(directory, instance, extra=None):
    from .synth import save_mask_sequence

    directory = Path(directory)
    (directory / "gt").mkdir(parents=True, exist_ok=True)
    save_png(directory / "I.png", instance.image)
    save_png(directory / "B.png", instance.background)
    save_obj(directory / "gt_mesh.obj", instance.gt_mesh)
    save_json(directory / "gt_motion.json", instance.gt_motion.to_dict())
    for i in range(instance.n_subframes):
        save_png(directory / "gt" / f"frame_{i:02d}.png", instance.gt_subframes[i])
        save_png(directory / "gt" / f"mask_{i:02d}.png", instance.gt_masks[i])
    manifest = {
        "kind": "synthetic-instance",
        "camera": instance.camera.to_dict(),
        "n_subframes": instance.n_subframes,
        "dense_steps": instance.dense_steps,
        "shape": instance.gt_mesh.name,
        "files": {"image": "I.png", "background": "B.png",
                  "gt_mesh": "gt_mesh.obj", "gt_motion": "gt_motion.json",
                  "gt_dir": "gt"},
    }
    manifest.update(extra or {})
    save_json(directory / "manifest.json", manifest)


def load_instance(directory):
    from .synth import SyntheticInstance

    directory = Path(directory)
    manifest = load_json(directory / "manifest.json")
    camera = Camera.from_dict(manifest["camera"])
    n = manifest["n_subframes"]
    motion_file = directory / "gt_motion.json"
    gt_motion = MotionState.from_dict(load_json(motion_file)) \
        if motion_file.exists() else None
    mesh_file = directory / "gt_mesh.obj"
    gt_mesh = load_obj(mesh_file) if mesh_file.exists() else None
    subframes = np.stack([load_png(directory / "gt" / f"frame_{i:02d}.png")
                          for i in range(n)])
    masks = np.stack([load_png(directory / "gt" / f"mask_{i:02d}.png",
                               grayscale=True) for i in range(n)])
    return SyntheticInstance(
        image=load_png(directory / "I.png"),
        background=load_png(directory / "B.png"),
        gt_mesh=gt_mesh, gt_motion=gt_motion,
        gt_subframes=subframes, gt_masks=masks,
        camera=camera, dense_steps=manifest["dense_steps"],
    )


# ---------------------------------------------------------------------------
# fit result directory layout

def save_fit_result(directory, result, config_dict=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_obj(directory / "mesh.obj", result.mesh)
    save_json(directory / "motion.json", result.motion.to_dict())
    save_loss_history(directory / "loss_history.csv", result.history)
    if result.reconstruction is not None:
        save_png(directory / "reconstruction.png", result.reconstruction)
    manifest = {
        "kind": "fit-result",
        "prototype": result.prototype,
        "seconds": result.seconds,
        "final": result.final.to_dict(),
        "config": config_dict or {},
        "files": {"mesh": "mesh.obj", "motion": "motion.json",
                  "loss_history": "loss_history.csv"},
    }
    save_json(directory / "manifest.json", manifest)


def load_fit_result(directory):
    directory = Path(directory)
    manifest = load_json(directory / "manifest.json")
    mesh = load_obj(directory / "mesh.obj")
    motion = MotionState.from_dict(load_json(directory / "motion.json"))
    return mesh, motion, manifest
