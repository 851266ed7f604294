"""Static pinhole camera and bounded code-to-world pose mappings.

World coordinates coincide with the camera frame: the camera sits at the
origin looking along +z with y up. Continuous pixel coordinates put the
center of pixel (0, 0) at (0.0, 0.0), x growing rightward (columns) and y
growing downward (rows), so the optical axis projects to
((W-1)/2, (H-1)/2).

Translation codes live in (-1, 1)^3: (u_x, u_y) = (-1, -1) places the
projected object center on the bottom-left image corner, (1, 1) on the
top-right. u_z interpolates inverse depth linearly between two anchors for
a nominal unit-diameter object: at u_z = -1 the object spans the full
vertical field of view, at u_z = +1 its disc covers 5% of the image area.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

MAX_DELTA_ROTATION = 2.0 * math.pi / 3.0  # rotation-over-exposure cap, 120 deg

# Canonical object scale the depth anchors refer to: a variance-normalized
# sphere has diameter 2, and anchoring the code-to-depth mapping to that
# scale keeps the whole object (not just its center) inside the frame over
# the representable depth range.
REFERENCE_DIAMETER = 2.0


@dataclass
class Camera:
    width: int = 320
    height: int = 240
    fov_deg: float = 45.0
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if not 0 < self.fov_deg < 180:
            raise ValueError("fov must be in (0, 180) degrees")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    @property
    def focal(self):
        """Focal length in pixels (square pixels, vertical FOV)."""
        return (self.height / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)

    @property
    def principal(self):
        return ((self.width - 1) / 2.0, (self.height - 1) / 2.0)

    def anchor_depths(self, reference_diameter=REFERENCE_DIAMETER):
        """(near, far) depths at which an object of `reference_diameter`
        spans the full vertical FOV and covers 5% of the image area."""
        d_near = reference_diameter * self.focal / self.height
        disc_diameter_px = 2.0 * math.sqrt(0.05 * self.width * self.height / math.pi)
        d_far = reference_diameter * self.focal / disc_diameter_px
        return d_near, d_far

    def to_dict(self):
        return {"width": self.width, "height": self.height, "fov_deg": self.fov_deg,
                "near": self.near, "far": self.far}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class NormalizedPose:
    """Decoded bounded pose codes: translation codes in (-1,1)^3, a unit
    initial quaternion and a capped rotation-delta code."""

    u_t: np.ndarray
    r: np.ndarray
    u_dr: np.ndarray
    u_dt: np.ndarray

    def __post_init__(self):
        for u in (self.u_t, self.u_dt):
            if np.max(np.abs(u)) >= 1.0:
                raise ValueError("translation codes must lie strictly inside (-1, 1)")


def project(points, camera):
    """Pinhole projection. Returns (xy pixel coords, depth, valid) where
    valid is False for points at or behind the camera plane."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    xy, depth, valid = project_t(torch.as_tensor(p), camera)
    xy, depth, valid = xy.numpy(), depth.numpy(), valid.numpy()
    if np.ndim(points) == 1:
        return xy[0], depth[0], bool(valid[0])
    return xy, depth, valid


def project_t(points, camera):
    cx, cy = camera.principal
    f = camera.focal
    z = points[..., 2]
    valid = z > camera.near
    z_safe = z.clamp_min(camera.near)
    x = cx + f * points[..., 0] / z_safe
    y = cy - f * points[..., 1] / z_safe
    return torch.stack([x, y], dim=-1), z, valid


def map_translation(u, camera):
    """World translation placing the object center at the screen position and
    depth encoded by u in (-1, 1)^3."""
    u = np.asarray(u, dtype=np.float64)
    if np.max(np.abs(u)) >= 1.0:
        raise ValueError("translation code outside (-1, 1)")
    return map_translation_t(torch.as_tensor(u), camera).numpy()


def map_translation_t(u, camera):
    d_near, d_far = camera.anchor_depths()
    inv_d = (1.0 - u[..., 2]) / (2.0 * d_near) + (1.0 + u[..., 2]) / (2.0 * d_far)
    depth = 1.0 / inv_d
    f = camera.focal
    x = u[..., 0] * (camera.width / 2.0) * depth / f
    y = u[..., 1] * (camera.height / 2.0) * depth / f
    return torch.stack([x, y, depth], dim=-1)


def cap_rotation_delta(code):
    """Map an unconstrained 4D code to a unit quaternion whose rotation angle
    saturates smoothly at 120 degrees. The zero code is the identity."""
    c = torch.as_tensor(np.asarray(code, dtype=np.float64))
    return cap_rotation_delta_t(c).numpy()


def cap_rotation_delta_t(code, max_angle=MAX_DELTA_ROTATION):
    # Exponential-map style: the vector part encodes axis * half-angle and the
    # raw angle 2|v| is squashed by tanh onto [0, max_angle). The scalar part
    # of the code does not move the output (its gradient is exactly zero).
    v = code[..., 1:]
    m = v.norm(dim=-1, keepdim=True)
    theta = max_angle * torch.tanh(2.0 * m / max_angle)
    m_safe = m.clamp_min(1e-12)
    factor = torch.where(m > 1e-9, torch.sin(theta / 2.0) / m_safe, torch.ones_like(m))
    return torch.cat([torch.cos(theta / 2.0), factor * v], dim=-1)


def rotation_delta_code(axis, angle, max_angle=MAX_DELTA_ROTATION):
    """Inverse of cap_rotation_delta for angle in [0, max_angle) radians."""
    if not 0 <= angle < max_angle:
        raise ValueError("angle must lie in [0, max_angle)")
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    raw = max_angle * np.arctanh(angle / max_angle)
    return np.concatenate([[0.0], axis * (raw / 2.0)])
