"""Three-stream (spatial, temporal, audio) clip classifier with mixture-of-experts fusion,
ranked-retrieval metrics and seeded input perturbations."""
from .fusion import MODES, ModelConfig, PredictionSet, TriStreamModel, forward_full
from .streams import SamplerConfig, VideoClip, image_as_clip

__version__ = "0.1.0"

__all__ = ["MODES", "ModelConfig", "PredictionSet", "SamplerConfig", "TriStreamModel", "VideoClip",
           "forward_full", "image_as_clip"]
