"""Alpha-weighted merge of base and side encodings, plus the layers around it.

The fused representation is ``R(x) = a0 * B(x) + sum_i a_i * S_i(x)`` with
nonnegative coefficients summing to one. Text encodings pass through an affine
adaptation layer first so every term in the sum has the same width.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .errors import (
    ArityMismatch,
    ConstraintViolation,
    DimensionMismatch,
    EmptyConfig,
    InvalidWidth,
    NegativeCoefficient,
)

ALPHA_TOL = 1e-6
FC_WIDTHS = (512, 1024)


@dataclass(frozen=True)
class AlphaConfig:
    alphas: tuple

    def __len__(self):
        return len(self.alphas)

    def __iter__(self):
        return iter(self.alphas)

    def label(self) -> str:
        return "/".join(f"{a:g}" for a in self.alphas)


def validate_alphas(alphas: Sequence[float]) -> AlphaConfig:
    """Check a coefficient list and wrap it.

    Values are stored as given. A list that is merely close to valid is
    rejected, never renormalized.
    """
    values = tuple(float(a) for a in alphas)
    if not values:
        raise EmptyConfig("alpha list is empty")
    for i, a in enumerate(values):
        if not math.isfinite(a):
            raise ConstraintViolation(f"alpha[{i}]={a} is not finite")
        if a < 0:
            raise NegativeCoefficient(f"alpha[{i}]={a} is negative")
    total = math.fsum(values)
    if abs(total - 1.0) > ALPHA_TOL:
        raise ConstraintViolation(f"alphas sum to {total:.9g}, expected 1")
    return AlphaConfig(values)


def combine(encodings: Sequence[torch.Tensor], alpha: AlphaConfig) -> torch.Tensor:
    """Weighted elementwise sum over the last (feature) axis.

    Terms with a coefficient of exactly 0 or 1 are handled so that a
    degenerate alpha returns that encoding bit for bit (``1.0 * x + 0.0 * y``
    is not guaranteed to equal ``x`` when ``y`` holds inf/nan, and float
    accumulation order could otherwise perturb the last ulp).
    """
    if len(encodings) != len(alpha.alphas):
        raise ArityMismatch(
            f"{len(encodings)} encodings for {len(alpha.alphas)} coefficients"
        )
    shape = encodings[0].shape
    for enc in encodings[1:]:
        if enc.shape != shape:
            raise DimensionMismatch(f"encoding shapes differ: {tuple(shape)} vs {tuple(enc.shape)}")

    active = [(a, enc) for a, enc in zip(alpha.alphas, encodings) if a != 0.0]
    if not active:
        # unreachable for a validated config, kept for hand-built ones
        return torch.zeros_like(encodings[0])
    if len(active) == 1 and active[0][0] == 1.0:
        a, enc = active[0]
        # keep the autograd edge so gradients still flow with weight 1
        return enc * 1.0 if enc.requires_grad else enc.clone()
    out = active[0][0] * active[0][1]
    for a, enc in active[1:]:
        out = out + a * enc
    return out


class AdaptationLayer(nn.Module):
    """Affine map from the text encoding width to the image encoding width."""

    def __init__(self, in_dim: int = 1536, target_dim: int = 1280):
        super().__init__()
        self.in_dim = in_dim
        self.target_dim = target_dim
        # nn.Linear default init: symmetric uniform scaled by fan-in
        self.linear = nn.Linear(in_dim, target_dim, bias=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"adaptation expects {self.in_dim}-d input, got {x.shape[-1]}")
        return self.linear(x)


def adapt(text_encoding: torch.Tensor, target_dim: int, layer: AdaptationLayer | None = None) -> torch.Tensor:
    if layer is None:
        layer = AdaptationLayer(1536, target_dim)
    if layer.target_dim != target_dim:
        raise DimensionMismatch(f"layer maps to {layer.target_dim}, asked for {target_dim}")
    return layer(text_encoding)


class ClassifierHead(nn.Module):
    """Optional dense layer followed by the class-score projection.

    Scores are left unnormalized; the loss applies the softmax.
    """

    def __init__(self, in_dim: int, num_classes: int, fc_width: int | None = None):
        super().__init__()
        if fc_width is not None and fc_width not in FC_WIDTHS:
            raise InvalidWidth(f"fc width must be one of {FC_WIDTHS} or absent, got {fc_width}")
        self.in_dim = in_dim
        self.fc_width = fc_width
        self.num_classes = num_classes
        if fc_width is None:
            self.fc = None
            self.out = nn.Linear(in_dim, num_classes)
        else:
            self.fc = nn.Sequential(nn.Linear(in_dim, fc_width), nn.ReLU(inplace=True))
            self.out = nn.Linear(fc_width, num_classes)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"head expects {self.in_dim}-d input, got {x.shape[-1]}")
        if self.fc is not None:
            x = self.fc(x)
        return self.out(x)


def classify(fused: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    return head(fused)


def predicted_class(scores) -> int | torch.Tensor:
    """Argmax with ties going to the lowest class index."""
    scores = torch.as_tensor(scores)
    # torch.argmax returns the first maximal index
    pred = torch.argmax(scores, dim=-1)
    return int(pred) if pred.ndim == 0 else pred


class FrozenEncoder(nn.Module):
    """Wrapper that locks an encoder: no gradients, inference-mode BN, always."""

    def __init__(self, encoder: nn.Module):
        super().__init__()
        self.encoder = encoder
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.encoder.eval()

    def train(self, mode: bool = True):
        # running statistics are part of the locked weights
        super().train(False)
        return self

    def forward(self, x):
        with torch.no_grad():
            return self.encoder(x)


class TextSide(nn.Module):
    """Text CNN followed by the adaptation layer into image-feature width."""

    def __init__(self, encoder: nn.Module, target_dim: int):
        super().__init__()
        self.encoder = encoder
        self.adaptation = AdaptationLayer(encoder.out_dim, target_dim)

    def forward(self, tokens):
        return self.adaptation(self.encoder(tokens))


class FusedEncoder(nn.Module):
    """Frozen base encoder, trainable sides, alpha merge, head.

    ``sides`` is a list of ``(module, modality)`` where modality is ``"image"``
    or ``"text"``. Image sides receive the preprocessed page tensor, text sides
    the embedded token matrix. The base always sees the image.
    """

    def __init__(self, base: nn.Module, sides, alpha: AlphaConfig, feature_dim: int,
                 num_classes: int, fc_width: int | None = None):
        super().__init__()
        if len(alpha.alphas) != len(sides) + 1:
            raise ArityMismatch(f"{len(alpha.alphas)} coefficients for {len(sides) + 1} encoders")
        self.base = base if isinstance(base, FrozenEncoder) else FrozenEncoder(base)
        self.sides = nn.ModuleList(m for m, _ in sides)
        self.modalities = [mod for _, mod in sides]
        for mod in self.modalities:
            if mod not in ("image", "text"):
                raise ValueError(f"unknown modality {mod!r}")
        self.alpha = alpha
        self.feature_dim = feature_dim
        self.head = ClassifierHead(feature_dim, num_classes, fc_width)

    @property
    def num_classes(self):
        return self.head.num_classes

    def encodings(self, image, text=None):
        out = [self.base(image)]
        for side, mod in zip(self.sides, self.modalities):
            out.append(side(image if mod == "image" else text))
        return out

    def represent(self, image, text=None):
        encs = self.encodings(image, text)
        for e in encs:
            if e.shape[-1] != self.feature_dim:
                raise DimensionMismatch(f"encoding width {e.shape[-1]} != {self.feature_dim}")
        return combine(encs, self.alpha)

    def forward(self, image, text=None):
        return self.head(self.represent(image, text))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]
