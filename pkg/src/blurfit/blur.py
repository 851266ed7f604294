"""Rendering-based image formation with motion blur.

A blurred observation is the time average of silhouette-composited renders
over the exposure interval [0, 1]:

    I_hat = mean_k [F_k * S_k] + (1 - mean_k S_k) * B

with the K sample times on the midpoint grid and the object pose at time
tau given by the initial pose advanced by the fraction tau of the constant
exposure motion (fixed rotation axis, angle scaled linearly; translation
interpolated linearly). Sub-interval integration of the same model yields
temporal super-resolution frames.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import quat
from .camera import MAX_DELTA_ROTATION
from .mesh import transform_vertices_t
from .raster import SoftRasterConfig, rasterize_t, _mesh_tensors


@dataclass
class MotionState:
    """Initial orientation r, exposure rotation dr (angle <= 120 deg),
    initial translation t and exposure translation dt."""

    r: np.ndarray
    dr: np.ndarray
    t: np.ndarray
    dt: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64)
        self.dr = np.asarray(self.dr, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.dt = np.asarray(self.dt, dtype=np.float64)
        for q in (self.r, self.dr):
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise ValueError("motion quaternions must be unit norm")
        angle = float(quat.rotation_angle(torch.as_tensor(self.dr)))
        if angle > MAX_DELTA_ROTATION + 1e-6:
            raise ValueError("exposure rotation exceeds the 120 degree cap")

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("r", "dr", "t", "dt")}

    @classmethod
    def from_dict(cls, d):
        return cls(r=d["r"], dr=d["dr"], t=d["t"], dt=d["dt"])


@dataclass
class ExposureGrid:
    """Midpoint quadrature of the exposure integral with `steps` samples."""

    steps: int = 8

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one quadrature step")

    def taus(self, t0=0.0, t1=1.0):
        k = np.arange(self.steps)
        return t0 + (k + 0.5) * (t1 - t0) / self.steps


def pose_at_t(r, dr, t, dt, tau):
    """Pose at exposure fraction tau: (r * dr^tau, t + tau*dt), differentiable.

    tau may be a scalar or a (K,) tensor; outputs gain the matching batch dim.
    """
    q = quat.multiply(r, quat.fractional(dr, tau))
    tau_col = tau.unsqueeze(-1) if torch.is_tensor(tau) and tau.dim() else tau
    return q, t + tau_col * dt


def pose_at(motion, tau):
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    r = torch.as_tensor(motion.r)
    dr = torch.as_tensor(motion.dr)
    q, t = pose_at_t(r, dr, torch.as_tensor(motion.t), torch.as_tensor(motion.dt),
                     torch.tensor(float(tau), dtype=r.dtype))
    return q.numpy(), t.numpy()


def render_exposure_t(vertices, faces, uv, texture, r, dr, t, dt, taus,
                      camera, config):
    """Appearance and silhouette stacks at the given sample times.

    Sub-renders are batched through one rasterizer call; vertices are posed
    per time sample by the rigid motion.
    """
    taus_t = torch.as_tensor(np.asarray(taus, dtype=np.float64), dtype=vertices.dtype)
    qs, ts = pose_at_t(r, dr, t, dt, taus_t)
    posed = transform_vertices_t(vertices.unsqueeze(0), qs, ts)
    out = rasterize_t(posed, faces, uv, texture, camera, config)
    return out.appearance, out.silhouette


def composite_t(appearances, silhouettes, background):
    """Average the silhouette-weighted renders and blend with the background."""
    fg = (appearances * silhouettes.unsqueeze(-1)).mean(0)
    coverage = silhouettes.mean(0)
    img = fg + (1.0 - coverage.unsqueeze(-1)) * background
    return img.clamp(0.0, 1.0)


def _check_background(background, camera):
    background = np.asarray(background, dtype=np.float64)
    if background.shape != (camera.height, camera.width, 3):
        raise ValueError("background dimensions must match the camera")
    return background


def _motion_tensors(motion):
    return (torch.as_tensor(motion.r), torch.as_tensor(motion.dr),
            torch.as_tensor(motion.t), torch.as_tensor(motion.dt))


def form_image(mesh, motion, background, camera, grid=None, config=None):
    """Blurred observation of the moving mesh over the full exposure."""
    grid = grid or ExposureGrid()
    config = config or SoftRasterConfig()
    background = _check_background(background, camera)
    v, f, u, tex = _mesh_tensors(mesh)
    r, dr, t, dt = _motion_tensors(motion)
    with torch.no_grad():
        apps, sils = render_exposure_t(v, f, u, tex, r, dr, t, dt,
                                       grid.taus(), camera, config)
        img = composite_t(apps, sils, torch.as_tensor(background))
    return img.numpy()


def render_subinterval(mesh, motion, tau0, tau1, background, camera,
                       grid=None, config=None):
    """Same formation model integrated over [tau0, tau1] only."""
    if not (0.0 <= tau0 < tau1 <= 1.0):
        raise ValueError("need 0 <= tau0 < tau1 <= 1")
    grid = grid or ExposureGrid()
    config = config or SoftRasterConfig()
    background = _check_background(background, camera)
    v, f, u, tex = _mesh_tensors(mesh)
    r, dr, t, dt = _motion_tensors(motion)
    with torch.no_grad():
        apps, sils = render_exposure_t(v, f, u, tex, r, dr, t, dt,
                                       grid.taus(tau0, tau1), camera, config)
        img = composite_t(apps, sils, torch.as_tensor(background))
    return img.numpy()


def render_sharp(mesh, motion, tau, background, camera, config=None):
    """Single instantaneous composite at exposure fraction tau. Returns
    (image, silhouette)."""
    config = config or SoftRasterConfig()
    background = _check_background(background, camera)
    v, f, u, tex = _mesh_tensors(mesh)
    r, dr, t, dt = _motion_tensors(motion)
    with torch.no_grad():
        apps, sils = render_exposure_t(v, f, u, tex, r, dr, t, dt,
                                       [float(tau)], camera, config)
        img = composite_t(apps, sils, torch.as_tensor(background))
    return img.numpy(), sils[0].numpy()


def render_novel_view(mesh, motion, tau, yaw_deg, camera,
                      background_policy="flat-grey", background=None,
                      config=None):
    """Sharp render at time tau with the camera orbited about the object
    center by yaw_deg around the vertical axis."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    config = config or SoftRasterConfig()
    if background_policy == "flat-grey":
        background = np.full((camera.height, camera.width, 3), 0.5)
    elif background_policy == "input-background":
        if background is None:
            raise ValueError("input-background policy needs a background image")
    else:
        raise ValueError(f"unknown background policy {background_policy!r}")
    background = _check_background(background, camera)

    q, t = pose_at(motion, tau)
    posed = transform_vertices_t(
        torch.as_tensor(mesh.vertices), torch.as_tensor(q), torch.as_tensor(t)
    )
    center = posed.mean(0)
    yaw = math.radians(yaw_deg)
    orbit = quat.from_axis_angle(torch.tensor([0.0, 1.0, 0.0]),
                                 torch.tensor(-yaw, dtype=torch.float64))
    verts = quat.rotate(orbit, posed - center) + center
    v, f, u, tex = _mesh_tensors(mesh)
    with torch.no_grad():
        out = rasterize_t(verts, f, u, tex, camera, config)
        img = composite_t(out.appearance.unsqueeze(0), out.silhouette.unsqueeze(0),
                          torch.as_tensor(background))
    return img.numpy()
