"""splatcore: pixel-aligned 3D Gaussian splatting toolkit.

Library + CLI for constructing pixel-aligned Gaussian clouds from two-view
point maps, rendering them with a differentiable tiled rasterizer, computing
covisibility loss masks and overlap-curated training pairs, and training a
small Gaussian-prediction head end to end on desk-scale synthetic scenes.
"""

__version__ = "0.1.0"

from .geometry import Camera, RigidPose, compose, invert_pose, project, unproject
from .masking import CurationConfig, LossMask, covisibility_mask, in_frustum
from .splat import GaussianCloud, PointMap, RawGaussianParams, SplatConfig
from .raster import RasterConfig, RenderOutput, render, render_backward

__all__ = [
    "Camera",
    "RigidPose",
    "compose",
    "invert_pose",
    "project",
    "unproject",
    "CurationConfig",
    "LossMask",
    "covisibility_mask",
    "in_frustum",
    "GaussianCloud",
    "PointMap",
    "RawGaussianParams",
    "SplatConfig",
    "RasterConfig",
    "RenderOutput",
    "render",
    "render_backward",
]
