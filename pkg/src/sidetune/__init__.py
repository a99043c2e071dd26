"""Multimodal side-tuning for document classification.

A frozen image backbone, a trainable copy of it and a text CNN are merged by a
fixed convex combination of their encodings before a small classifier head.
"""

from .errors import SideTuneError
from .fusion import (
    AdaptationLayer,
    AlphaConfig,
    ClassifierHead,
    FrozenEncoder,
    FusedEncoder,
    TextSide,
    adapt,
    classify,
    combine,
    predicted_class,
    validate_alphas,
)
from .model import build_model
from .text import (
    EmbeddingTable,
    TextClassifier,
    TextCNN,
    TextEncoderConfig,
    TokenMatrix,
    count_text_params,
    embed,
    text_forward,
    tokenize,
)
from .vision import BackbonePair, PageImage, VisionConfig, backbone_forward, preprocess, trainable_param_report

__version__ = "0.1.0"
