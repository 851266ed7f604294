"""blurfit: textured 3D mesh and rigid sub-frame motion from one blurred image.

The package reconstructs an object's shape, texture, initial pose and
constant exposure-time motion (3D translation + 3D rotation) from a single
motion-blurred photograph plus a clean background, by gradient descent
through a differentiable soft rasterizer. It also ships a synthetic
benchmark generator and the evaluation metric suite.
"""

from .mesh import (TexturedMesh, Adjacency, make_sphere_prototype,
                   make_torus_prototype, normalize_vertices, transform,
                   apply_offsets, build_adjacency, mesh_diameter)
from .camera import Camera, project, map_translation, cap_rotation_delta
from .raster import SoftRasterConfig, RenderOutput, render_silhouette, render_appearance
from .blur import MotionState, ExposureGrid, pose_at, form_image, render_subinterval, render_novel_view
from .losses import (LossBreakdown, loss_image, iou, loss_silhouette, loss_laplacian,
                     loss_tv, loss_diff, loss_appearance, loss_joint)
from .fit import FitConfig, FitResult, fit, select_prototype, init_params, decode, adam_step
from .synth import (SyntheticInstance, MaskSequence, generate_instance,
                    background_difference_mask, load_mask_sequence, estimate_background)
from .metrics import (EvalReport, psnr, ssim, tiou, translation_error,
                      rotation_error, mesh_distance)

__version__ = "0.1.0"
