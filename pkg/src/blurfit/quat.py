"""Quaternion helpers used throughout the pipeline.

Convention: scalar-first (w, x, y, z), right-handed, active rotations.
All functions are torch-based and differentiable; they broadcast over
leading batch dimensions.
"""

import torch

IDENTITY = (1.0, 0.0, 0.0, 0.0)


def normalize(q, eps=1e-12):
    """Return q / |q|. Zero-norm input is undefined; guarded with eps."""
    return q / q.norm(dim=-1, keepdim=True).clamp_min(eps)


def multiply(q1, q2):
    """Hamilton product q1 * q2 (apply q2 first when rotating vectors as q1*q2)."""
    w1, x1, y1, z1 = q1.unbind(-1)
    w2, x2, y2, z2 = q2.unbind(-1)
    return torch.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        dim=-1,
    )


def conjugate(q):
    w, x, y, z = q.unbind(-1)
    return torch.stack([w, -x, -y, -z], dim=-1)


def rotate(q, v):
    """Rotate vectors v (...,3) by unit quaternion q (...,4), actively.
    Shapes broadcast."""
    qv = q[..., 1:]
    w = q[..., :1]
    qv_b, v_b = torch.broadcast_tensors(qv, v)
    t = 2.0 * torch.linalg.cross(qv_b, v_b, dim=-1)
    return v + w * t + torch.linalg.cross(qv_b.broadcast_to(t.shape), t, dim=-1)


def from_axis_angle(axis, angle):
    """Unit quaternion for a rotation of `angle` radians about `axis` (...,3)."""
    axis = torch.as_tensor(axis, dtype=torch.float64) if not torch.is_tensor(axis) else axis
    angle = torch.as_tensor(angle, dtype=axis.dtype) if not torch.is_tensor(angle) else angle
    axis = axis / axis.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    half = 0.5 * angle
    w = torch.cos(half)
    xyz = axis * torch.sin(half).unsqueeze(-1)
    return torch.cat([w.unsqueeze(-1), xyz], dim=-1)


def rotation_angle(q):
    """Rotation angle in radians, in [0, pi]; invariant to the sign of q."""
    v = q[..., 1:].norm(dim=-1)
    w = q[..., 0].abs()
    return 2.0 * torch.atan2(v, w)


def fractional(q, tau):
    """q raised to the power tau: same axis, angle scaled by tau.

    Assumes w >= 0 (angle <= 180 deg), which holds for capped rotation
    deltas. Smooth at the identity.
    """
    v = q[..., 1:]
    w = q[..., 0]
    m = v.norm(dim=-1)
    half = torch.atan2(m, w)
    new_half = tau * half
    # sin(new_half)/m is smooth at m=0; series limit is tau/[d half/d m]^-1 ~ tau.
    m_safe = m.clamp_min(1e-30)
    scale = torch.where(m > 1e-15, torch.sin(new_half) / m_safe, tau * torch.ones_like(m))
    return torch.cat(
        [torch.cos(new_half).unsqueeze(-1), scale.unsqueeze(-1) * v], dim=-1
    )


def as_tensor(q, dtype=torch.float64):
    q = torch.as_tensor(q, dtype=dtype)
    if q.shape[-1] != 4:
        raise ValueError("quaternion must have 4 components")
    return q
