"""Synthetic benchmark instances: ground-truth scene -> blurred observation.

The observation is produced by the same formation model the fit minimizes,
but integrated on a dense quadrature grid (>= 8x the sub-frame count) so
the fit's coarse discretization error stays part of the problem. Ground
truth sub-frames are sub-interval integrals (high-speed-camera style) and
ground-truth masks are sharp silhouettes at sub-frame midpoints.

Shapes, textures and backgrounds are procedural so the benchmark is fully
self-contained.
"""

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import quat
from .blur import (ExposureGrid, MotionState, form_image, render_sharp,
                   render_subinterval)
from .camera import MAX_DELTA_ROTATION, Camera
from .mesh import (TexturedMesh, make_sphere_prototype, make_torus_prototype,
                   mesh_diameter, normalize_vertices)
from .raster import SoftRasterConfig


@dataclass
class MaskSequence:
    """Per-sub-frame real-valued masks, optionally with appearance images."""

    masks: np.ndarray              # (N, H, W) in [0, 1]
    appearances: np.ndarray = None  # (N, H, W, 3) or None
    source: str = "external"

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if self.masks.min() < 0 or self.masks.max() > 1:
            raise ValueError("mask values must lie in [0, 1]")
        if self.appearances is not None:
            self.appearances = np.asarray(self.appearances, dtype=np.float64)
            if self.appearances.shape[:3] != self.masks.shape:
                raise ValueError("appearance dimensions do not match masks")

    def __len__(self):
        return len(self.masks)


@dataclass
class SyntheticInstance:
    image: np.ndarray
    background: np.ndarray
    gt_mesh: TexturedMesh
    gt_motion: MotionState
    gt_subframes: np.ndarray   # (N, H, W, 3)
    gt_masks: np.ndarray       # (N, H, W)
    camera: Camera
    dense_steps: int

    @property
    def n_subframes(self):
        return len(self.gt_masks)

    def mask_sequence(self):
        apps = self.gt_subframes * self.gt_masks[..., None]
        return MaskSequence(masks=self.gt_masks, appearances=apps,
                            source="ground-truth")


# ---------------------------------------------------------------------------
# procedural ground-truth content

def make_bumpy_sphere(rings=17, segments=24, amplitude=0.12, lobes=3,
                      phase=0.0, texture_size=64):
    """Sphere with a smooth radial modulation; stays genus 0 and normalized."""
    base = make_sphere_prototype(rings, segments, texture_size=texture_size,
                                 name="bumpy-sphere")
    v = base.vertices
    r = np.linalg.norm(v, axis=1)
    theta = np.arccos(np.clip(v[:, 1] / np.maximum(r, 1e-12), -1, 1))
    phi = np.arctan2(v[:, 2], v[:, 0])
    bump = 1.0 + amplitude * np.sin(lobes * theta) * np.cos(lobes * phi + phase)
    return base.with_vertices(normalize_vertices(v * bump[:, None]))


def make_squashed_torus(major_segments=24, minor_segments=16,
                        scale=(1.0, 0.75, 1.25), texture_size=64):
    base = make_torus_prototype(major_segments, minor_segments,
                                texture_size=texture_size, name="squashed-torus")
    return base.with_vertices(
        normalize_vertices(base.vertices * np.asarray(scale)[None, :])
    )


def texture_checker(size=64, tiles=8, dark=(0.1, 0.15, 0.5), light=(0.95, 0.85, 0.2)):
    iy, ix = np.mgrid[0:size, 0:size]
    cell = ((iy * tiles // size) + (ix * tiles // size)) % 2
    tex = np.where(cell[..., None] == 0, np.asarray(dark), np.asarray(light))
    return tex.astype(np.float64)


def texture_gradient(size=64, start=(0.9, 0.2, 0.1), stop=(0.1, 0.4, 0.9)):
    ramp = np.linspace(0.0, 1.0, size)[:, None]
    tex = (1 - ramp)[..., None] * np.asarray(start) + ramp[..., None] * np.asarray(stop)
    return np.broadcast_to(tex, (size, size, 3)).astype(np.float64).copy()


def texture_noise(size=64, rng=None, cells=6, low=0.15, high=0.9):
    rng = rng or np.random.default_rng(0)
    coarse = rng.uniform(low, high, size=(cells, cells, 3))
    return np.clip(ndimage.zoom(coarse, (size / cells, size / cells, 1), order=1),
                   0.0, 1.0)


TEXTURES = {"checker": texture_checker, "gradient": texture_gradient,
            "noise": texture_noise}


def make_background(width, height, rng=None):
    """Soft gradient plus a few blurred blobs; mid-toned, never saturated."""
    rng = rng or np.random.default_rng(0)
    iy, ix = np.mgrid[0:height, 0:width]
    base = 0.35 + 0.3 * (iy / max(height - 1, 1))
    img = np.stack([base, base * rng.uniform(0.8, 1.1), base * rng.uniform(0.8, 1.1)],
                   axis=-1)
    for _ in range(4):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        rad = rng.uniform(0.1, 0.35) * max(width, height)
        color = rng.uniform(0.2, 0.8, size=3)
        blob = np.exp(-(((ix - cx) ** 2 + (iy - cy) ** 2) / (2 * rad ** 2)))
        img = img + 0.35 * blob[..., None] * (color - img)
    return np.clip(img, 0.05, 0.95)


# ---------------------------------------------------------------------------
# motion sampling and instance generation

def _random_rotation_pair(rng, mean_rotation_deg, rotation_spread_deg):
    r = rng.normal(size=4)
    r = r / np.linalg.norm(r)
    axis = rng.normal(size=3)
    axis = axis / np.linalg.norm(axis)
    angle = rng.normal(math.radians(mean_rotation_deg),
                       math.radians(rotation_spread_deg))
    angle = float(np.clip(angle, math.radians(5.0), MAX_DELTA_ROTATION - 1e-3))
    dr = quat.from_axis_angle(torch.as_tensor(axis),
                              torch.tensor(angle, dtype=torch.float64)).numpy()
    return r, dr


def sample_motion(rng, camera, diameter, mean_translation_diameters=3.0,
                  translation_spread=0.1, mean_rotation_deg=100.0,
                  rotation_spread_deg=15.0, depth_code_range=(0.2, 0.9)):
    """Draw a random motion. The translation magnitude is normal around
    `mean_translation_diameters` object diameters; the rotation angle is
    normal around `mean_rotation_deg` but capped at 120 degrees. The draw is
    unconstrained; callers reject trajectories that leave the frame."""
    r, dr = _random_rotation_pair(rng, mean_rotation_deg, rotation_spread_deg)

    u = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                  rng.uniform(*depth_code_range)])
    from .camera import map_translation

    t0 = map_translation(u, camera)
    direction = rng.normal(size=3)
    direction[2] *= 0.35  # keep trajectories mostly lateral
    direction = direction / np.linalg.norm(direction)
    magnitude = max(rng.normal(mean_translation_diameters, translation_spread),
                    0.05) * diameter
    return MotionState(r=r, dr=dr, t=t0, dt=direction * magnitude)


def _visible_code_box(camera, uz, radius, margin=0.03):
    """Largest |u_x|, |u_y| codes keeping a sphere of `radius` at the depth
    encoded by uz fully inside the frame (bisection of the visibility test)."""
    from .camera import map_translation

    def axis_bound(axis):
        probe = [0.0, 0.0, uz]
        if not _pose_visible(map_translation(probe, camera), radius, camera):
            return 0.0
        lo, hi = 0.0, 1.0 - 1e-6
        for _ in range(24):
            mid = (lo + hi) / 2
            probe[axis] = mid
            if _pose_visible(map_translation(probe, camera), radius, camera):
                lo = mid
            else:
                hi = mid
        return max(lo - margin, 0.0)

    return axis_bound(0), axis_bound(1)


def sample_visible_motion(rng, camera, radius, mean_translation_diameters=None,
                          translation_spread=0.15, mean_rotation_deg=100.0,
                          rotation_spread_deg=15.0, depth_code_range=(-0.2, 0.6)):
    """Draw a motion whose start and end poses keep the object in frame.

    Both trajectory endpoints are sampled as visible translation codes in
    the deeper half of the representable depth range; the paper-scale
    3-diameter translations cannot stay inside the frustum for normalized
    meshes, so the magnitude is whatever the frame allows (optionally
    shortened toward `mean_translation_diameters`)."""
    from .camera import map_translation

    r, dr = _random_rotation_pair(rng, mean_rotation_deg, rotation_spread_deg)

    def visible_draw(uz):
        bx, by = _visible_code_box(camera, uz, radius)
        if bx <= 0.02 or by <= 0.02:
            return None
        return np.array([rng.uniform(-bx, bx), rng.uniform(-by, by), uz]), (bx, by)

    # first endpoint free; second roughly mirrored through the image center so
    # the streak crosses the central region the optimization starts from
    u0 = u1 = None
    for _ in range(64):
        u0 = visible_draw(rng.uniform(*depth_code_range))
        if u0 is not None:
            break
    if u0 is None:
        raise ValueError("object too large for the visible depth range")
    for _ in range(64):
        uz1 = rng.uniform(*depth_code_range)
        bx, by = _visible_code_box(camera, uz1, radius)
        if bx <= 0.02 or by <= 0.02:
            continue
        mirror = -u0[0][:2] * rng.uniform(0.4, 1.0)
        lateral = mirror + rng.normal(scale=0.12, size=2)
        if abs(lateral[0]) < bx and abs(lateral[1]) < by:
            u1 = np.array([lateral[0], lateral[1], uz1])
            break
    if u1 is None:
        raise ValueError("object too large for the visible depth range")
    t0 = map_translation(u0[0], camera)
    t1 = map_translation(u1, camera)
    dt = t1 - t0
    if mean_translation_diameters is not None:
        diameter = 2.0 * radius
        target = max(rng.normal(mean_translation_diameters, translation_spread),
                     0.1) * diameter
        length = float(np.linalg.norm(dt))
        if length > 1e-9 and target < length:
            dt = dt * (target / length)
    return MotionState(r=r, dr=dr, t=t0, dt=dt)


def _sphere_extent_px(offset, z, radius):
    """Projected extent (in focal-length units) of a sphere along one image
    axis, from the tangent rays in that axis/depth plane."""
    hyp = math.hypot(offset, z)
    if hyp <= radius * 1.001:
        return None
    beta = math.asin(radius / hyp)
    ang = math.atan2(offset, z)
    if ang + beta >= math.pi / 2 - 1e-6 or ang - beta <= -(math.pi / 2 - 1e-6):
        return None
    return math.tan(ang - beta), math.tan(ang + beta)


def _pose_visible(center, radius, camera, margin_px=3.0):
    x0, y0, z = center
    if z - radius <= camera.near:
        return False
    f = camera.focal
    cx, cy = camera.principal
    ext_x = _sphere_extent_px(x0, z, radius)
    ext_y = _sphere_extent_px(y0, z, radius)
    if ext_x is None or ext_y is None:
        return False
    lo_x, hi_x = (cx + f * e for e in ext_x)
    hi_y, lo_y = (cy - f * e for e in ext_y)
    return (lo_x >= margin_px and hi_x <= camera.width - 1 - margin_px
            and lo_y >= margin_px and hi_y <= camera.height - 1 - margin_px)


def _trajectory_visible(mesh, motion, camera, samples=17, margin_px=3.0):
    """Bounding-sphere visibility prefilter along the trajectory."""
    radius = float(np.linalg.norm(mesh.vertices, axis=1).max())
    for tau in np.linspace(0.0, 1.0, samples):
        if not _pose_visible(motion.t + tau * motion.dt, radius, camera, margin_px):
            return False
    return True


def _masks_inside_frame(masks, border=1, tol=2e-3):
    """Authoritative check: rendered silhouettes stay off the frame border."""
    m = np.asarray(masks)
    edges = np.concatenate([m[:, :border, :].ravel(), m[:, -border:, :].ravel(),
                            m[:, :, :border].ravel(), m[:, :, -border:].ravel()])
    return float(edges.max(initial=0.0)) < tol


def generate_instance(mesh, motion, background, camera, n_subframes=8,
                      dense_steps=64, config=None):
    """Render a ground-truth scene into a SyntheticInstance."""
    if dense_steps < 8 * n_subframes:
        raise ValueError("dense_steps must be at least 8x the sub-frame count")
    config = config or SoftRasterConfig()

    masks = []
    for i in range(n_subframes):
        _, sil = render_sharp(mesh, motion, (i + 0.5) / n_subframes, background,
                              camera, config)
        masks.append(sil)
    if not _masks_inside_frame(masks):
        raise ValueError("trajectory out of frame")

    image = form_image(mesh, motion, background, camera,
                       ExposureGrid(dense_steps), config)
    sub_grid = ExposureGrid(max(dense_steps // n_subframes, 1))
    subframes = []
    for i in range(n_subframes):
        t0, t1 = i / n_subframes, (i + 1) / n_subframes
        subframes.append(render_subinterval(mesh, motion, t0, t1, background,
                                            camera, sub_grid, config))
    return SyntheticInstance(
        image=image, background=np.asarray(background, dtype=np.float64),
        gt_mesh=mesh, gt_motion=motion,
        gt_subframes=np.stack(subframes), gt_masks=np.stack(masks),
        camera=camera, dense_steps=dense_steps,
    )


def sample_instance(rng, camera, shape="bumpy-sphere", texture="checker",
                    n_subframes=8, dense_steps=64,
                    mean_translation_diameters=1.2, mean_rotation_deg=100.0,
                    max_tries=200, config=None):
    """Draw shape/texture/background/motion and render one valid instance.

    The default translation scale is below the unconstrained sampler mean:
    only short trajectories fit the visible frustum for variance-normalized
    objects, so longer draws would be rejected forever.
    """
    if shape == "bumpy-sphere":
        gt = make_bumpy_sphere(amplitude=rng.uniform(0.06, 0.14),
                               lobes=int(rng.integers(2, 4)),
                               phase=rng.uniform(0, 2 * math.pi))
    elif shape == "squashed-torus":
        gt = make_squashed_torus(scale=(1.0, rng.uniform(0.6, 0.9),
                                        rng.uniform(1.0, 1.3)))
    elif shape == "sphere":
        gt = make_sphere_prototype(17, 24, texture_size=64, name="sphere")
    elif shape == "torus":
        gt = make_torus_prototype(24, 16, texture_size=64, name="torus")
    else:
        raise ValueError(f"unknown shape {shape!r}")
    tex_fn = TEXTURES[texture]
    gt_tex = tex_fn(size=gt.texture.shape[0], rng=rng) if texture == "noise" \
        else tex_fn(size=gt.texture.shape[0])
    gt = TexturedMesh(vertices=gt.vertices, faces=gt.faces, uv=gt.uv,
                      texture=gt_tex, name=gt.name)

    background = make_background(camera.width, camera.height, rng)
    radius = float(np.linalg.norm(gt.vertices, axis=1).max())
    for _ in range(max_tries):
        motion = sample_visible_motion(
            rng, camera, radius,
            mean_translation_diameters=mean_translation_diameters,
            mean_rotation_deg=mean_rotation_deg)
        if not _trajectory_visible(gt, motion, camera, margin_px=1.0):
            continue
        try:
            return generate_instance(gt, motion, background, camera,
                                     n_subframes, dense_steps, config)
        except ValueError:
            continue
    raise ValueError("trajectory out of frame: no visible draw found")


# ---------------------------------------------------------------------------
# masks from background subtraction and from disk

def background_difference_mask(image, background, threshold=0.1):
    """Binary mask of pixels whose color differs from the background by more
    than `threshold` in euclidean norm over channels."""
    image = np.asarray(image, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if image.shape != background.shape:
        raise ValueError("image and background dimensions differ")
    dist = np.linalg.norm(image - background, axis=-1)
    return (dist > threshold).astype(np.float64)


def estimate_background(frames):
    """Per-pixel, per-channel median of a frame stack."""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if not frames:
        raise ValueError("need at least one frame")
    if any(f.shape != frames[0].shape for f in frames):
        raise ValueError("frames must share dimensions")
    return np.median(np.stack(frames), axis=0)


def load_mask_sequence(path):
    """Load mask_XX.png (and optional appearance_XX.png) from a directory."""
    from . import fileio

    path = Path(path)
    mask_files = sorted(path.glob("mask_*.png"))
    if not mask_files:
        raise ValueError(f"no mask_XX.png files in {path}")
    indices = []
    for f in mask_files:
        m = re.fullmatch(r"mask_(\d+)\.png", f.name)
        if not m:
            raise ValueError(f"unexpected mask file name {f.name}")
        indices.append(int(m.group(1)))
    if sorted(indices) != list(range(len(mask_files))):
        raise ValueError(f"mask indices are not contiguous from 0: {sorted(indices)}")

    masks = [fileio.load_png(f, grayscale=True) for f in mask_files]
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        offenders = [f.name for f, m in zip(mask_files, masks)
                     if m.shape != masks[0].shape]
        raise ValueError(f"masks have mixed sizes: {offenders}")

    app_files = sorted(path.glob("appearance_*.png"))
    appearances = None
    if app_files:
        if len(app_files) != len(mask_files):
            raise ValueError("appearance file count does not match masks")
        appearances = np.stack([fileio.load_png(f) for f in app_files])
        if appearances.shape[1:3] != masks[0].shape:
            raise ValueError("appearance dimensions do not match masks")
    return MaskSequence(masks=np.stack(masks), appearances=appearances,
                        source="external")


def save_mask_sequence(path, sequence):
    from . import fileio

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(sequence.masks):
        fileio.save_png(path / f"mask_{i:02d}.png", mask)
    if sequence.appearances is not None:
        for i, app in enumerate(sequence.appearances):
            fileio.save_png(path / f"appearance_{i:02d}.png", app)
