"""Dual refinement single-shot detectors and their temporal variants, in numpy."""

from .autodiff import Tensor, backward
from .boxes import OffsetCoding, decode, encode, generate_anchors, jaccard
from .model import Model, ModelConfig, build, forward
from .temporal import KeyFrameSchedule, soft_refine, stream_detect

__all__ = [
    "Tensor", "backward", "OffsetCoding", "decode", "encode", "generate_anchors", "jaccard",
    "Model", "ModelConfig", "build", "forward", "KeyFrameSchedule", "soft_refine", "stream_detect",
]
__version__ = "0.1.0"
