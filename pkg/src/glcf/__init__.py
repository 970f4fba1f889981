"""Global-local correspondence framework for visual anomaly detection."""

from .backbone import BackboneConfig, FeaturePyramid, build_backbone, extract_features
from .bottleneck import BottleneckConfig, BottleneckOutput, SemanticBottleneck
from .heads import DecoderConfig, PyramidDecoder
from .model import GLCF, build_model, load_checkpoint, save_checkpoint
from .scoring import AnomalyResult, CalibrationStats, FusionConfig, score_images
from .training import TrainingConfig, calibrate, train_glcf

__version__ = "0.1.0"

__all__ = [
    "AnomalyResult",
    "BackboneConfig",
    "BottleneckConfig",
    "BottleneckOutput",
    "CalibrationStats",
    "DecoderConfig",
    "FeaturePyramid",
    "FusionConfig",
    "GLCF",
    "TrainingConfig",
    "build_backbone",
    "build_model",
    "calibrate",
    "extract_features",
    "load_checkpoint",
    "PyramidDecoder",
    "save_checkpoint",
    "score_images",
    "SemanticBottleneck",
    "train_glcf",
    "__version__",
]
