"""Evaluation metrics: image fidelity, trajectory IoU and 3D errors.

Shape error rescales each mesh to tightly fit a unit cube, aligns the
estimate over the 24 rotational symmetries of the cube and averages the
exact point-to-nearest-triangle distance in both directions; translation
error is reported in units of one object diameter and rotation error as the
relative-rotation angle in degrees.
"""

import itertools
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from scipy.signal import convolve2d

from . import quat


@dataclass
class EvalReport:
    tiou: float = None
    psnr_mean: float = None
    ssim_mean: float = None
    eps_translation: float = None
    eps_rotation_deg: float = None
    eps_mesh: float = None
    psnr_per_frame: list = None
    ssim_per_frame: list = None

    def to_dict(self):
        return asdict(self)


PSNR_CAP_DB = 99.0


def _check_images(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 99."""
    a, b = _check_images(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window_size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean local SSIM over valid windows with a gaussian weighting,
    channel-averaged; images must be at least window-sized."""
    a, b = _check_images(a, b)
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise ValueError("images are smaller than the SSIM window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    w = _gaussian_window(window_size, sigma)

    def filt(x):
        return convolve2d(x, w, mode="valid")

    values = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx ** 2 + my ** 2 + c1) * (sxx + syy + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


def _binary_iou(a, b):
    inter = float(np.logical_and(a, b).sum())
    union = float(np.logical_or(a, b).sum())
    if union == 0.0:
        return 1.0
    return inter / union


def tiou(estimated, ground_truth, threshold=0.5):
    """Trajectory IoU: mean over sub-frames of the IoU of the silhouettes
    binarized at 0.5."""
    est = np.asarray(estimated, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError("silhouette stacks differ in count or dimensions")
    return float(np.mean([_binary_iou(e > threshold, g > threshold)
                          for e, g in zip(est, gt)]))


def translation_error(dt, dt_gt, object_diameter):
    """Euclidean translation error in object diameters."""
    if object_diameter <= 0:
        raise ValueError("object diameter must be positive")
    dt = np.asarray(dt, dtype=np.float64)
    dt_gt = np.asarray(dt_gt, dtype=np.float64)
    return float(np.linalg.norm(dt - dt_gt) / object_diameter)


def rotation_error(dr, dr_gt):
    """Angle of the relative rotation in degrees, in [0, 180]."""
    dr = np.asarray(dr, dtype=np.float64)
    dr_gt = np.asarray(dr_gt, dtype=np.float64)
    for q in (dr, dr_gt):
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("rotation quaternions must be unit norm")
    rel = quat.multiply(quat.conjugate(torch.as_tensor(dr_gt)), torch.as_tensor(dr))
    return math.degrees(float(quat.rotation_angle(rel)))


# ---------------------------------------------------------------------------
# mesh distance

def _unit_cube_rescale(vertices):
    v = np.asarray(vertices, dtype=np.float64)
    lo, hi = v.min(axis=0), v.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 1e-12:
        raise ValueError("degenerate mesh with zero extent")
    return (v - (lo + hi) / 2.0) / extent


def cube_rotations():
    """The 24 rotation matrices of the cube group (signed permutations with
    determinant +1)."""
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            m = np.zeros((3, 3))
            for row, (col, s) in enumerate(zip(perm, signs)):
                m[row, col] = s
            if np.linalg.det(m) > 0.5:
                mats.append(m)
    return mats


def point_triangle_distances(points, tri_a, tri_b, tri_c):
    """Exact distances from each point to the nearest of the given triangles.

    The closest point on a triangle is either the orthogonal projection onto
    its plane (when that lands inside) or the closest point of one of the
    three edges. Vectorized over points x triangles.
    """
    p = points[:, None, :]
    a, b, c = tri_a[None], tri_b[None], tri_c[None]
    n = np.cross(tri_b - tri_a, tri_c - tri_a)[None]
    nn = (n * n).sum(-1)
    nn_safe = np.maximum(nn, 1e-30)

    dist_plane = ((p - a) * n).sum(-1) / np.sqrt(nn_safe)
    proj = p - dist_plane[..., None] * n / np.sqrt(nn_safe)[..., None]
    # barycentric test of the projection
    area2 = lambda u, v, w: (np.cross(v - u, w - u) * n).sum(-1)
    inside = ((area2(a, b, proj) >= -1e-12 * nn_safe)
              & (area2(b, c, proj) >= -1e-12 * nn_safe)
              & (area2(c, a, proj) >= -1e-12 * nn_safe))

    def seg_d2(u, v):
        e = v - u
        t = ((p - u) * e).sum(-1) / np.maximum((e * e).sum(-1), 1e-30)
        q = u + np.clip(t, 0.0, 1.0)[..., None] * e
        d = p - q
        return (d * d).sum(-1)

    edge_d2 = np.minimum(np.minimum(seg_d2(a, b), seg_d2(b, c)), seg_d2(c, a))
    d2 = np.where(inside & (nn > 1e-30), dist_plane ** 2, edge_d2)
    return np.sqrt(d2.min(axis=1))


def _directed_distance(vertices, target_vertices, target_faces, chunk=256):
    ta = target_vertices[target_faces[:, 0]]
    tb = target_vertices[target_faces[:, 1]]
    tc = target_vertices[target_faces[:, 2]]
    dists = []
    for start in range(0, len(vertices), chunk):
        dists.append(point_triangle_distances(vertices[start:start + chunk],
                                              ta, tb, tc))
    return float(np.concatenate(dists).mean())


def mesh_distance(mesh_a, mesh_b, align=True):
    """Average bidirectional vertex-to-surface distance in unit-cube units,
    minimized over the 24 cube-symmetry alignments of the first mesh."""
    va = _unit_cube_rescale(mesh_a.vertices)
    vb = _unit_cube_rescale(mesh_b.vertices)
    fa = np.asarray(mesh_a.faces)
    fb = np.asarray(mesh_b.faces)
    rotations = cube_rotations() if align else [np.eye(3)]
    best = math.inf
    for rot in rotations:
        var = va @ rot.T
        d = 0.5 * (_directed_distance(var, vb, fb)
                   + _directed_distance(vb, var, fa))
        best = min(best, d)
    return best


# ---------------------------------------------------------------------------
# end-to-end evaluation of a fit result against a synthetic instance

def evaluate(result_mesh, result_motion, instance, config=None):
    """EvalReport of a recovered scene against ground truth.

    TSR frames of the recovered model are rendered on the instance's
    sub-frame grid and compared with the stored ground truth; 3D errors use
    the instance's mesh and motion when present (pass None fields to skip).
    """
    from .blur import ExposureGrid, render_sharp, render_subinterval
    from .mesh import mesh_diameter

    n = instance.n_subframes
    camera = instance.camera
    steps = max(instance.dense_steps // n, 1)
    frames, sils = [], []
    for i in range(n):
        frames.append(render_subinterval(result_mesh, result_motion,
                                         i / n, (i + 1) / n,
                                         instance.background, camera,
                                         ExposureGrid(steps), config))
        _, sil = render_sharp(result_mesh, result_motion, (i + 0.5) / n,
                              instance.background, camera, config)
        sils.append(sil)

    psnrs = [psnr(f, g) for f, g in zip(frames, instance.gt_subframes)]
    ssims = [ssim(f, g) for f, g in zip(frames, instance.gt_subframes)]
    report = EvalReport(
        tiou=tiou(np.stack(sils), instance.gt_masks),
        psnr_mean=float(np.mean(psnrs)),
        ssim_mean=float(np.mean(ssims)),
        psnr_per_frame=[float(x) for x in psnrs],
        ssim_per_frame=[float(x) for x in ssims],
    )
    if instance.gt_motion is not None:
        diameter = mesh_diameter(instance.gt_mesh.vertices)
        report.eps_translation = translation_error(result_motion.dt,
                                                   instance.gt_motion.dt, diameter)
        report.eps_rotation_deg = rotation_error(result_motion.dr,
                                                 instance.gt_motion.dr)
    if instance.gt_mesh is not None:
        report.eps_mesh = mesh_distance(result_mesh, instance.gt_mesh)
    return report
