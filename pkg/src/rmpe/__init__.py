"""Non-neural core of a regional multi-person pose estimation pipeline.

Affine transform inversion with gradients, parametric pose NMS with
data-driven parameter tuning, a PCKh mAP evaluator, a pose-guided proposal
generator, and a seeded synthetic detector for exercising all of them.
"""

from .core import (MPII_SCHEMA, BBox, BoxOffset, GroundTruth, ImageAnnotation, Joint,
                   JointSchema, Pose, PoseProposal, apply_offset, box_offset, extend_box)
from .evaluation import EvalConfig, EvalReport, evaluate
from .nms import NmsParams, run_nms, run_nms_batch
from .optim import OptimConfig, optimize_params

__version__ = "0.1.0"

__all__ = [
    "MPII_SCHEMA", "BBox", "BoxOffset", "GroundTruth", "ImageAnnotation", "Joint",
    "JointSchema", "Pose", "PoseProposal", "apply_offset", "box_offset", "extend_box",
    "EvalConfig", "EvalReport", "evaluate", "NmsParams", "run_nms", "run_nms_batch",
    "OptimConfig", "optimize_params",
]
