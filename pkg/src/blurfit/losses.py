"""Loss terms and the joint objective.

The joint objective is
    L = L_image + L_silhouette + L_tv + lambda_lap * L_laplacian
with unit weights everywhere except the Laplacian regularizer
(lambda_lap = 1000 by default). The difference-mask and appearance losses
exist for ablations and are not part of the default objective.

Each term has a torch core (differentiable, used inside the fit loop) and a
numpy-friendly wrapper that validates inputs.
"""

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class LossBreakdown:
    l_image: float
    l_silhouette: float
    l_tv: float
    l_laplacian: float
    lambda_lap: float
    total: float

    @classmethod
    def build(cls, l_image, l_silhouette, l_tv, l_laplacian, lambda_lap):
        parts = [float(x) for x in (l_image, l_silhouette, l_tv, l_laplacian)]
        total = parts[0] + parts[1] + parts[2] + lambda_lap * parts[3]
        return cls(*parts, lambda_lap=float(lambda_lap), total=total)

    def to_dict(self):
        return {"l_image": self.l_image, "l_silhouette": self.l_silhouette,
                "l_tv": self.l_tv, "l_laplacian": self.l_laplacian,
                "lambda_lap": self.lambda_lap, "total": self.total}


def _pair(a, b, name):
    a = torch.as_tensor(np.asarray(a, dtype=np.float64))
    b = torch.as_tensor(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def loss_image_t(image_pred, image_obs):
    return (image_pred - image_obs).abs().mean()


def loss_image(image_pred, image_obs):
    """Mean absolute difference over all pixels and channels."""
    a, b = _pair(image_pred, image_obs, "loss_image")
    return float(loss_image_t(a, b))


def iou_t(m1, m2):
    inter = (m1 * m2).sum()
    union = (m1 + m2 - m1 * m2).sum()
    # two empty masks agree perfectly
    return torch.where(union > 0, inter / union.clamp_min(1e-30),
                       torch.ones_like(union))


def iou(m1, m2):
    """Soft intersection-over-union of two masks with values in [0, 1]."""
    a, b = _pair(m1, m2, "iou")
    for m in (a, b):
        if float(m.min()) < -1e-9 or float(m.max()) > 1.0 + 1e-9:
            raise ValueError("mask values must lie in [0, 1]")
    return float(iou_t(a, b))


def loss_silhouette_t(silhouettes, masks):
    ious = [iou_t(masks[k], silhouettes[k]) for k in range(silhouettes.shape[0])]
    return 1.0 - torch.stack(ious).mean()


def loss_silhouette(silhouettes, masks):
    """One minus the sub-frame-averaged IoU between rendered silhouettes and
    the reference masks (midpoint discretization of the exposure integral)."""
    s = torch.as_tensor(np.asarray(silhouettes, dtype=np.float64))
    m = torch.as_tensor(np.asarray(masks, dtype=np.float64))
    if s.shape != m.shape:
        raise ValueError("silhouette/mask count or dimensions mismatch")
    return float(loss_silhouette_t(s, m))


def loss_laplacian_t(vertices, padded, mask, counts):
    neigh = vertices[padded]                       # (V, D, 3)
    summed = (neigh * mask.unsqueeze(-1)).sum(1)
    centroid = summed / counts.unsqueeze(-1)
    return (vertices - centroid).pow(2).sum()


def adjacency_tensors(adjacency, dtype=torch.float64):
    padded = torch.as_tensor(adjacency.padded, dtype=torch.long)
    counts = torch.as_tensor(adjacency.counts, dtype=dtype)
    mask = torch.arange(padded.shape[1]).unsqueeze(0) < torch.as_tensor(
        adjacency.counts
    ).unsqueeze(1)
    return padded, mask.to(dtype), counts


def loss_laplacian(mesh_or_vertices, adjacency):
    """Sum over vertices of the squared distance to the neighbor centroid."""
    vertices = getattr(mesh_or_vertices, "vertices", mesh_or_vertices)
    v = torch.as_tensor(np.asarray(vertices, dtype=np.float64))
    if adjacency.counts.size and adjacency.counts.min() == 0:
        raise ValueError("vertex with empty neighborhood")
    if len(adjacency.counts) != len(v):
        raise ValueError("adjacency does not match vertex count")
    padded, mask, counts = adjacency_tensors(adjacency)
    return float(loss_laplacian_t(v, padded, mask, counts))


def loss_tv_t(texture):
    t = texture if texture.dim() == 3 else texture.unsqueeze(-1)
    dx = (t[:, 1:, :] - t[:, :-1, :]).abs().sum(dim=(0, 1))
    dy = (t[1:, :, :] - t[:-1, :, :]).abs().sum(dim=(0, 1))
    pixels = t.shape[0] * t.shape[1]
    return ((dx + dy) / pixels).mean()


def loss_tv(texture):
    """Total variation of the texture map: mean absolute forward difference
    per pixel, channel-averaged."""
    t = torch.as_tensor(np.asarray(texture, dtype=np.float64))
    if t.shape[0] < 2 or t.shape[1] < 2:
        raise ValueError("texture must be at least 2x2")
    return float(loss_tv_t(t))


def loss_diff(silhouettes, difference_mask, coverage_threshold=1e-3):
    """Difference-mask ablation loss: one minus the IoU between the binary
    background-subtraction mask and the binarized union of silhouettes.

    The union is thresholded (strictly positive coverage, with a small
    constant so rasterizer haze does not count), which makes this loss
    piecewise constant; it is reported for ablations, and the fit's
    background-difference mode instead feeds the mask into the silhouette
    consistency loss per sub-frame.
    """
    s = torch.as_tensor(np.asarray(silhouettes, dtype=np.float64))
    d = torch.as_tensor(np.asarray(difference_mask, dtype=np.float64))
    if s.shape[1:] != d.shape:
        raise ValueError("dimension mismatch")
    binary = ((d - 0.0).abs() < 1e-12) | ((d - 1.0).abs() < 1e-12)
    if not bool(binary.all()):
        raise ValueError("difference mask must be binary")
    union = (s.mean(0) > coverage_threshold).to(d.dtype)
    return float(1.0 - iou_t(d, union))


def loss_appearance_t(rendered, reference):
    return (rendered - reference).abs().mean()


def loss_appearance(rendered, reference):
    """Mean per-sub-frame L1 difference between rendered appearances and the
    externally estimated ones."""
    a, b = _pair(rendered, reference, "loss_appearance")
    return float(loss_appearance_t(a, b))


def loss_joint(image_pred, image_obs, silhouettes, masks, texture,
               mesh_or_vertices, adjacency, lambda_lap=1000.0):
    """Joint objective; masks may be None to drop the silhouette term."""
    l_i = loss_image(image_pred, image_obs)
    l_s = loss_silhouette(silhouettes, masks) if masks is not None else 0.0
    l_t = loss_tv(texture)
    l_l = loss_laplacian(mesh_or_vertices, adjacency)
    return LossBreakdown.build(l_i, l_s, l_t, l_l, lambda_lap)
