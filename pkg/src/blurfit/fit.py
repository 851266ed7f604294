"""Test-time optimization of shape, texture and motion.

All free parameters live as unconstrained codes: vertex offsets are used
directly, texture codes pass through a sigmoid, the two translation codes
(for t and t + dt) through tanh followed by the screen-anchored depth
mapping, the initial rotation through quaternion normalization and the
rotation delta through the 120-degree exponential-map cap. Decoding
re-normalizes the mesh every iteration so the canonical-space invariants
hold throughout.

The optimizer is plain Adam with bias correction (beta1=0.9, beta2=0.999,
eps=1e-8) at a fixed learning rate. The method is deterministic: no random
numbers are drawn anywhere in the loop.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import quat
from .blur import MotionState, composite_t, render_exposure_t
from .camera import Camera, cap_rotation_delta_t, map_translation_t
from .losses import (LossBreakdown, adjacency_tensors, loss_image_t,
                     loss_laplacian_t, loss_appearance_t, loss_silhouette_t,
                     loss_tv_t)
from .mesh import build_adjacency, normalize_vertices_t
from .raster import SoftRasterConfig, _mesh_tensors


class FitNumericalError(RuntimeError):
    """Raised when a loss term stops being finite during optimization."""

    def __init__(self, term, iteration):
        super().__init__(f"non-finite loss term {term!r} at iteration {iteration}")
        self.term = term
        self.iteration = iteration


@dataclass
class FitConfig:
    lr: float = 0.1
    iterations: int = 500
    exposure_steps: int = 8
    lambda_lap: float = 1000.0
    silhouette_source: str = "external-masks"  # background-difference | none
    use_appearance_loss: bool = False
    diff_threshold: float = 0.1
    raster: SoftRasterConfig = field(default_factory=SoftRasterConfig)
    dtype: str = "float64"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.silhouette_source not in ("external-masks", "background-difference", "none"):
            raise ValueError(f"unknown silhouette source {self.silhouette_source!r}")

    @property
    def torch_dtype(self):
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]


@dataclass
class ParamState:
    """Optimization codes plus Adam moment accumulators."""

    codes: dict
    adam_m: dict
    adam_v: dict
    step: int = 0

    def named(self):
        return self.codes.items()


@dataclass
class FitResult:
    mesh: object
    motion: MotionState
    final: LossBreakdown
    history: list
    prototype: str
    seconds: float
    reconstruction: np.ndarray = None


def init_params(prototype, dtype=torch.float64):
    """Grey texture, zero offsets, identity rotations, image-center start."""
    v = np.asarray(prototype.vertices)
    th, tw = prototype.texture.shape[0], prototype.texture.shape[1]
    codes = {
        "offsets": torch.zeros((len(v), 3), dtype=dtype, requires_grad=True),
        "texture": torch.zeros((th, tw, 3), dtype=dtype, requires_grad=True),
        "t": torch.zeros(3, dtype=dtype, requires_grad=True),
        "t_end": torch.zeros(3, dtype=dtype, requires_grad=True),
        "r": torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=dtype, requires_grad=True),
        "dr": torch.zeros(4, dtype=dtype, requires_grad=True),
    }
    zeros = {k: torch.zeros_like(t) for k, t in codes.items()}
    return ParamState(codes=codes,
                      adam_m=zeros,
                      adam_v={k: torch.zeros_like(t) for k, t in codes.items()})


def decode_t(params, proto_vertices, camera):
    """Differentiable decoding of all codes into scene quantities."""
    codes = params.codes
    vertices = normalize_vertices_t(proto_vertices + codes["offsets"])
    texture = torch.sigmoid(codes["texture"])
    t0 = map_translation_t(torch.tanh(codes["t"]), camera)
    t1 = map_translation_t(torch.tanh(codes["t_end"]), camera)
    r = quat.normalize(codes["r"])
    dr = cap_rotation_delta_t(codes["dr"])
    return vertices, texture, r, dr, t0, t1 - t0


def decode(params, prototype, camera=None):
    """Decoded (TexturedMesh, MotionState); raises on non-finite codes."""
    camera = camera or Camera()
    for name, code in params.named():
        if not bool(torch.isfinite(code).all()):
            raise ValueError(f"non-finite values in code {name!r}")
    dtype = params.codes["offsets"].dtype
    proto_v = torch.as_tensor(prototype.vertices, dtype=dtype)
    with torch.no_grad():
        vertices, texture, r, dr, t0, dt = decode_t(params, proto_v, camera)
    mesh = replace(prototype,
                   vertices=vertices.numpy().astype(np.float64),
                   texture=texture.numpy().astype(np.float64))
    motion = MotionState(r=r.numpy(), dr=dr.numpy(), t=t0.numpy(), dt=dt.numpy())
    return mesh, motion


def adam_step(params, grads, lr, betas=(0.9, 0.999), eps=1e-8):
    """Standard Adam update with bias correction; mutates params in place."""
    params.step += 1
    t = params.step
    b1, b2 = betas
    with torch.no_grad():
        for name, code in params.named():
            g = grads[name]
            if g is None:
                continue
            if g.shape != code.shape:
                raise ValueError(f"gradient shape mismatch for {name!r}")
            m = params.adam_m[name]
            v = params.adam_v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            code -= lr * m_hat / (v_hat.sqrt() + eps)
    return params


def _mask_schedule(taus, n_masks):
    """Sub-frame mask index feeding each quadrature sample."""
    idx = np.minimum((np.asarray(taus) * n_masks).astype(int), n_masks - 1)
    return idx


def _prepare_masks(config, image, background, masks):
    if config.silhouette_source == "none":
        return None, None
    if config.silhouette_source == "background-difference":
        from .synth import background_difference_mask

        d = background_difference_mask(image, background, config.diff_threshold)
        return d[None, ...], None
    if masks is None:
        raise ValueError("silhouette source 'external-masks' needs masks")
    arr = np.asarray(getattr(masks, "masks", masks), dtype=np.float64)
    apps = getattr(masks, "appearances", None)
    if arr.ndim != 3:
        raise ValueError("masks must be a (N, H, W) stack")
    return arr, (np.asarray(apps, dtype=np.float64) if apps is not None else None)


def fit(image, background, prototype, config=None, camera=None, masks=None):
    """Recover mesh, texture and motion explaining one blurred observation.

    image, background: (H, W, 3) arrays in [0, 1]; masks: optional
    MaskSequence (or (N, H, W) array) guiding the silhouette term.
    Deterministic: identical inputs give bit-identical loss histories.
    """
    config = config or FitConfig()
    camera = camera or Camera()
    image = np.asarray(image, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if image.shape != background.shape:
        raise ValueError("image and background dimensions differ")
    if image.shape != (camera.height, camera.width, 3):
        raise ValueError("image dimensions do not match the camera")

    dtype = config.torch_dtype
    start = time.perf_counter()
    mask_stack, app_stack = _prepare_masks(config, image, background, masks)

    proto_v, faces_t, uv_t, _ = _mesh_tensors(prototype, dtype=dtype)
    adjacency = build_adjacency(prototype.faces)
    adj_padded, adj_mask, adj_counts = adjacency_tensors(adjacency, dtype=dtype)
    image_t = torch.as_tensor(image, dtype=dtype)
    background_t = torch.as_tensor(background, dtype=dtype)
    taus = (np.arange(config.exposure_steps) + 0.5) / config.exposure_steps
    if mask_stack is not None:
        sched = _mask_schedule(taus, mask_stack.shape[0])
        masks_t = torch.as_tensor(mask_stack[sched], dtype=dtype)
        apps_t = (torch.as_tensor(app_stack[sched], dtype=dtype)
                  if app_stack is not None and config.use_appearance_loss else None)
    else:
        masks_t, apps_t = None, None

    params = init_params(prototype, dtype=dtype)
    history = []
    for it in range(config.iterations):
        vertices, texture, r, dr, t0, dt = decode_t(params, proto_v, camera)
        apps, sils = render_exposure_t(vertices, faces_t, uv_t, texture,
                                       r, dr, t0, dt, taus, camera, config.raster)
        image_pred = composite_t(apps, sils, background_t)

        l_i = loss_image_t(image_pred, image_t)
        l_s = (loss_silhouette_t(sils, masks_t) if masks_t is not None
               else torch.zeros((), dtype=dtype))
        l_t = loss_tv_t(texture)
        l_l = loss_laplacian_t(vertices, adj_padded, adj_mask, adj_counts)
        total = l_i + l_s + l_t + config.lambda_lap * l_l
        if apps_t is not None:
            l_f = loss_appearance_t(apps * sils.unsqueeze(-1), apps_t)
            total = total + l_f

        for term, value in (("image", l_i), ("silhouette", l_s),
                            ("tv", l_t), ("laplacian", l_l)):
            if not bool(torch.isfinite(value)):
                raise FitNumericalError(term, it)

        total.backward()
        history.append(LossBreakdown.build(l_i, l_s, l_t, l_l, config.lambda_lap))
        grads = {name: code.grad for name, code in params.named()}
        adam_step(params, grads, config.lr)
        for _, code in params.named():
            code.grad = None

    mesh, motion = decode(params, prototype, camera)
    with torch.no_grad():
        v2, tex2, r2, dr2, t2, dt2 = decode_t(
            params, torch.as_tensor(prototype.vertices, dtype=dtype), camera)
        apps, sils = render_exposure_t(v2, faces_t, uv_t, tex2, r2, dr2, t2, dt2,
                                       taus, camera, config.raster)
        reconstruction = composite_t(apps, sils, background_t).numpy()
    return FitResult(mesh=mesh, motion=motion, final=history[-1],
                     history=history, prototype=prototype.name,
                     seconds=time.perf_counter() - start,
                     reconstruction=reconstruction)


def select_prototype(image, background, prototypes, config=None, camera=None,
                     masks=None):
    """Fit every prototype independently and keep the result with the lowest
    final image-formation loss; earlier prototypes win ties."""
    if not prototypes:
        raise ValueError("need at least one prototype")
    best = None
    for proto in prototypes:
        try:
            result = fit(image, background, proto, config=config, camera=camera,
                         masks=masks)
        except FitNumericalError:
            continue
        if best is None or result.final.l_image < best.final.l_image:
            best = result
    if best is None:
        raise FitNumericalError("all prototypes", -1)
    return best
