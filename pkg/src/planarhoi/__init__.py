"""Planar humanoid-object-interaction control stack.

Three progressively trained stages share a single planar simulator:

1. a motion-tracking backbone that compresses reference keypoint windows into
   a low-dimensional latent and decodes latents to whole-body actions,
2. a keypoint tracker that steers the frozen backbone through residuals on
   the latent prior, and
3. an interaction adaptor that adds bounded joint-space corrections for
   object tasks.

Reference motion comes either from procedural clips or from a point-track
extraction pipeline (filtering, aggregation, first-frame calibration).
"""

from .config import ConfigError, RunConfig
from .motion import MotionClip, generate_clip
from .sim import SimConfig
from .stack import ControlStack

__all__ = [
    "ConfigError",
    "ControlStack",
    "MotionClip",
    "RunConfig",
    "SimConfig",
    "generate_clip",
]

__version__ = "0.1.0"
