"""Page preprocessing and the frozen/trainable backbone pair."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DegenerateImage, InvalidConfig, ShapeError
from .fusion import FrozenEncoder, FusedEncoder

FEATURE_DIMS = {"mobilenet_v2": 1280, "resnet50": 2048}
BACKBONE_ALIASES = {
    "mobilenetv2": "mobilenet_v2",
    "mobilenet_v2": "mobilenet_v2",
    "resnet50": "resnet50",
}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def canonical_backbone(name: str) -> str:
    try:
        return BACKBONE_ALIASES[name.lower().replace("-", "_")]
    except KeyError:
        raise InvalidConfig(f"unknown backbone {name!r}; expected one of {sorted(FEATURE_DIMS)}") from None


@dataclass
class PageImage:
    pixels: np.ndarray  # H x W, float in [0, 1]
    source: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise DegenerateImage(f"{self.source or 'image'} has shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise DegenerateImage(f"{self.source or 'image'} has non-finite pixels")


@dataclass
class VisionConfig:
    backbone: str = "mobilenet_v2"
    input_side: int = 384
    channel_mean: tuple = IMAGENET_MEAN
    channel_std: tuple = IMAGENET_STD
    interpolation: str = "bilinear"
    width_mult: float = 1.0
    pretrained: str = "none"

    def __post_init__(self):
        self.backbone = canonical_backbone(self.backbone)
        self.channel_mean = tuple(float(m) for m in self.channel_mean)
        self.channel_std = tuple(float(s) for s in self.channel_std)
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise InvalidConfig("channel statistics need three entries")
        if any(s <= 0 for s in self.channel_std):
            raise InvalidConfig("channel_std entries must be > 0")
        if self.input_side < 1:
            raise InvalidConfig("input_side must be positive")

    @property
    def feature_dim(self) -> int:
        return FEATURE_DIMS[self.backbone]


def load_page(path) -> PageImage:
    """Decode a TIFF/PNG/JPEG scan to single-channel intensities in [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                arr = arr / (65535.0 if arr.max() > 255 else 255.0)
            else:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DegenerateImage(f"cannot decode {path}: {exc}") from None
    return PageImage(arr.astype(np.float32), str(path))


def replicate(image: PageImage, side: int, mode: str = "bilinear") -> torch.Tensor:
    """Resize to ``side x side`` and copy the gray channel three times (no standardization)."""
    if image.pixels.size == 0:
        raise DegenerateImage("zero-area image")
    x = torch.from_numpy(np.ascontiguousarray(image.pixels, dtype=np.float32))[None, None]
    if x.shape[-2:] != (side, side):
        x = F.interpolate(x, size=(side, side), mode=mode, align_corners=False,
                          antialias=mode in ("bilinear", "bicubic"))
    return x[0].expand(3, side, side).contiguous()


def preprocess(image: PageImage, cfg: VisionConfig) -> torch.Tensor:
    x = replicate(image, cfg.input_side, cfg.interpolation)
    mean = torch.tensor(cfg.channel_mean, dtype=x.dtype).view(3, 1, 1)
    std = torch.tensor(cfg.channel_std, dtype=x.dtype).view(3, 1, 1)
    return (x - mean) / std


def channel_stats(images, cfg: VisionConfig):
    """Per-channel mean and std of replicated, resized pages (training split).

    Accumulated in float64 over every pixel, so the result is the population
    statistic of the whole set rather than an average of per-image values.
    """
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for img in images:
        if not isinstance(img, PageImage):
            img = load_page(img)
        x = replicate(img, cfg.input_side, cfg.interpolation).double()
        total += x.sum(dim=(1, 2)).numpy()
        total_sq += (x * x).sum(dim=(1, 2)).numpy()
        count += x.shape[1] * x.shape[2]
    if count == 0:
        raise DegenerateImage("no images to compute statistics from")
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    std = np.sqrt(var)
    std[std < 1e-6] = 1.0
    return tuple(mean.tolist()), tuple(std.tolist())


class _Features(nn.Module):
    """Backbone without its classifier: conv trunk, global average pool, flatten."""

    def __init__(self, trunk: nn.Module, out_dim: int):
        super().__init__()
        self.trunk = trunk
        self.out_dim = out_dim

    def forward(self, x):
        if x.ndim == 3:
            x = x.unsqueeze(0)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"backbone expects (N, 3, H, W), got {tuple(x.shape)}")
        x = self.trunk(x)
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


def build_backbone(cfg: VisionConfig) -> nn.Module:
    """Construct a penultimate-feature extractor.

    ``cfg.pretrained`` is ``"none"`` (random init), ``"imagenet"`` (torchvision
    published weights) or a path to a state dict for the full torchvision
    model.
    """
    import torchvision.models as tvm

    weights = None
    if cfg.pretrained == "imagenet":
        weights = {"mobilenet_v2": tvm.MobileNet_V2_Weights.IMAGENET1K_V1,
                   "resnet50": tvm.ResNet50_Weights.IMAGENET1K_V1}[cfg.backbone]
    if cfg.backbone == "mobilenet_v2":
        if weights is not None and cfg.width_mult != 1.0:
            raise InvalidConfig("published MobileNetV2 weights exist only for width_mult=1.0")
        net = tvm.mobilenet_v2(weights=weights, width_mult=cfg.width_mult)
    else:
        if cfg.width_mult != 1.0:
            raise InvalidConfig("width_mult is only supported for mobilenet_v2")
        net = tvm.resnet50(weights=weights)
    if cfg.pretrained not in ("none", "imagenet", ""):
        state = torch.load(cfg.pretrained, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    if cfg.backbone == "mobilenet_v2":
        trunk = net.features
        out_dim = net.last_channel
    else:
        trunk = nn.Sequential(*list(net.children())[:-2])
        out_dim = net.fc.in_features
    if out_dim != cfg.feature_dim:
        raise ShapeError(f"{cfg.backbone} produced {out_dim}-d features, expected {cfg.feature_dim}")
    return _Features(trunk, out_dim)


@dataclass
class BackbonePair:
    base: FrozenEncoder
    side: nn.Module
    checkpoint_id: str = "random-init"

    @classmethod
    def build(cls, cfg: VisionConfig):
        net = build_backbone(cfg)
        side = copy.deepcopy(net)
        return cls(FrozenEncoder(net), side, checkpoint_id=_checkpoint_id(cfg))


def _checkpoint_id(cfg: VisionConfig) -> str:
    if cfg.pretrained == "imagenet":
        return f"torchvision:{cfg.backbone}:IMAGENET1K_V1"
    if cfg.pretrained in ("none", ""):
        return f"random-init:{cfg.backbone}:width{cfg.width_mult:g}"
    return f"file:{Path(cfg.pretrained).name}"


def backbone_forward(tensor: torch.Tensor, pair: BackbonePair, which: str = "base") -> torch.Tensor:
    if which == "base":
        return pair.base(tensor)
    if which == "side":
        return pair.side(tensor)
    raise ValueError(f"which must be 'base' or 'side', got {which!r}")


def _count(module, trainable_only=False):
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


# published reference parameter counts, for side-by-side reporting
REFERENCE_PARAMS = {
    ("text",): "~1.8M",
    ("mobilenet_v2", "finetune"): "~3.5M",
    ("mobilenet_v2", "image-side"): "~7M",
    ("mobilenet_v2", "multimodal"): "~12M",
    ("resnet50", "image-side"): "~51M",
    ("resnet50", "multimodal"): "~57M",
}


def trainable_param_report(model: FusedEncoder) -> dict:
    """Parameter counts per component.

    The base is reported but never counted as trainable. Text sides are split
    into the CNN and the adaptation layer; the adaptation layer belongs to the
    trainable side budget.
    """
    report = {"base": _count(model.base), "base_trainable": _count(model.base, True)}
    sides = []
    for i, (side, mod) in enumerate(zip(model.sides, model.modalities), start=1):
        entry = {"index": i, "modality": mod, "trainable": _count(side, True)}
        if mod == "text":
            entry["adaptation"] = _count(side.adaptation, True)
            entry["encoder"] = entry["trainable"] - entry["adaptation"]
        sides.append(entry)
    report["sides"] = sides
    report["fc"] = _count(model.head.fc, True)
    report["head"] = _count(model.head.out, True)
    report["trainable"] = sum(p.numel() for p in model.parameters() if p.requires_grad)
    report["total"] = sum(p.numel() for p in model.parameters())
    # published counts for these backbones include their 1000-way ImageNet
    # classifier; add it back once per image network for a like-for-like figure
    n_image = 1 + sum(m == "image" for m in model.modalities)
    extra = n_image * (model.feature_dim * 1000 + 1000)
    report["total_with_imagenet_heads"] = report["total"] + extra
    report["trainable_with_imagenet_heads"] = report["trainable"] + extra - (
        model.feature_dim * 1000 + 1000)
    return report


def format_param_report(report, reference: str | None = None) -> str:
    lines = [f"base (frozen): {report['base']:,}"]
    for s in report["sides"]:
        extra = f" (encoder {s['encoder']:,} + adaptation {s['adaptation']:,})" if "adaptation" in s else ""
        lines.append(f"side {s['index']} [{s['modality']}]: {s['trainable']:,}{extra}")
    lines.append(f"fc: {report['fc']:,}")
    lines.append(f"head: {report['head']:,}")
    lines.append(f"trainable: {report['trainable']:,}")
    lines.append(f"total: {report['total']:,} ({report['total_with_imagenet_heads']:,} counting ImageNet heads)")
    if reference:
        lines.append(f"reference: {reference}")
    return "\n".join(lines)
