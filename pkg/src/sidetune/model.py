"""Assemble the fused multimodal classifier from its parts."""
from __future__ import annotations

from .fusion import FusedEncoder, TextSide, validate_alphas
from .text import TextCNN, TextEncoderConfig
from .vision import BackbonePair, VisionConfig


def build_model(vision: VisionConfig, text: TextEncoderConfig | None, alphas, num_classes: int,
                fc_width: int | None = None, image_side: bool = True):
    """Base + optional image side + optional text side.

    The alpha list length must match: one coefficient for the base, then one
    per side in the order image, text.
    """
    alpha = validate_alphas(alphas)
    pair = BackbonePair.build(vision)
    sides = []
    if image_side:
        sides.append((pair.side, "image"))
    if text is not None:
        sides.append((TextSide(TextCNN(text), vision.feature_dim), "text"))
    model = FusedEncoder(pair.base, sides, alpha, vision.feature_dim, num_classes, fc_width)
    model.backbone_checkpoint = pair.checkpoint_id
    return model
