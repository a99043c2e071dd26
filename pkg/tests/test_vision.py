import numpy as np
import pytest
import torch
from PIL import Image

from sidetune.errors import DegenerateImage, InvalidConfig, ShapeError
from sidetune.fusion import FrozenEncoder
from sidetune.model import build_model
from sidetune.text import TextEncoderConfig
from sidetune.training import state_hash
from sidetune.vision import (
    BackbonePair,
    PageImage,
    VisionConfig,
    backbone_forward,
    channel_stats,
    format_param_report,
    load_page,
    preprocess,
    replicate,
    trainable_param_report,
)

TINY = dict(width_mult=0.25, input_side=64)


def test_preprocess_shape_and_channel_equality():
    page = PageImage(np.random.default_rng(0).random((200, 300), dtype=np.float32))
    cfg = VisionConfig()
    raw = replicate(page, 384)
    assert raw.shape == (3, 384, 384)
    assert torch.equal(raw[0], raw[1]) and torch.equal(raw[1], raw[2])
    out = preprocess(page, cfg)
    assert out.shape == (3, 384, 384)
    # after standardization channels differ only by their (mean, std) constants
    for c in range(3):
        torch.testing.assert_close(out[c] * cfg.channel_std[c] + cfg.channel_mean[c], raw[c])


def test_preprocess_standardization_identity():
    page = PageImage(np.full((50, 70), 0.4, np.float32))
    cfg = VisionConfig(channel_mean=(0.4, 0.4, 0.4), channel_std=(1, 1, 1))
    out = preprocess(page, cfg)
    assert out.shape == (3, 384, 384)
    torch.testing.assert_close(out, torch.zeros(3, 384, 384), rtol=0, atol=1e-6)


def test_same_size_resize_is_identity():
    pix = np.random.default_rng(1).random((384, 384), dtype=np.float32)
    out = replicate(PageImage(pix), 384)
    assert torch.equal(out[0], torch.from_numpy(pix))


def test_degenerate_images(tmp_path):
    with pytest.raises(DegenerateImage):
        PageImage(np.zeros((0, 5), np.float32))
    bad = tmp_path / "x.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(DegenerateImage):
        load_page(bad)


@pytest.mark.parametrize("suffix", [".png", ".tif", ".jpg"])
def test_load_page_formats(tmp_path, suffix):
    arr = (np.arange(20 * 30).reshape(20, 30) % 256).astype(np.uint8)
    path = tmp_path / f"p{suffix}"
    Image.fromarray(arr, mode="L").save(path)
    page = load_page(path)
    assert page.pixels.shape == (20, 30)
    assert page.pixels.min() >= 0 and page.pixels.max() <= 1
    if suffix != ".jpg":
        np.testing.assert_allclose(page.pixels, arr / 255.0, atol=1e-6)


def test_rgb_scan_decoded_to_single_channel(tmp_path):
    path = tmp_path / "rgb.png"
    Image.new("RGB", (8, 6), (255, 255, 255)).save(path)
    page = load_page(path)
    assert page.pixels.shape == (6, 8) and np.allclose(page.pixels, 1.0)


def test_vision_config_validation():
    with pytest.raises(InvalidConfig):
        VisionConfig(channel_std=(1, 0, 1))
    with pytest.raises(InvalidConfig):
        VisionConfig(backbone="vgg16")
    assert VisionConfig("MobileNetV2").feature_dim == 1280
    assert VisionConfig("resnet50").feature_dim == 2048


def test_standardization_statistics(corpus):
    paths = sorted(str(p) for p in corpus["image_root"].rglob("*.png"))
    cfg = VisionConfig(input_side=64)
    mean, std = channel_stats(paths, cfg)
    assert mean[0] == mean[1] == mean[2]
    cfg = VisionConfig(input_side=64, channel_mean=mean, channel_std=std)
    batch = torch.stack([preprocess(load_page(p), cfg) for p in paths]).double()
    per_channel_mean = batch.mean(dim=(0, 2, 3))
    per_channel_std = batch.std(dim=(0, 2, 3))
    assert torch.all(per_channel_mean.abs() < 0.05)
    assert torch.all((per_channel_std - 1).abs() < 0.1)


@pytest.mark.parametrize("backbone, dim, kw", [
    ("mobilenet_v2", 1280, TINY),
    ("mobilenet_v2", 1280, {"input_side": 64}),
    ("resnet50", 2048, {"input_side": 64}),
])
def test_backbone_feature_dims(backbone, dim, kw):
    pair = BackbonePair.build(VisionConfig(backbone, **kw))
    x = torch.randn(2, 3, kw["input_side"], kw["input_side"])
    assert backbone_forward(x, pair, "base").shape == (2, dim)
    pair.side.eval()
    assert backbone_forward(x, pair, "side").shape == (2, dim)


def test_backbone_pair_identical_then_diverges():
    pair = BackbonePair.build(VisionConfig(**TINY))
    pair.side.eval()
    probe = torch.randn(1, 3, 64, 64)
    b0 = backbone_forward(probe, pair, "base")
    assert torch.equal(b0, backbone_forward(probe, pair, "side"))
    assert torch.equal(b0, backbone_forward(probe, pair, "base"))
    pair.side.train()
    opt = torch.optim.SGD(pair.side.parameters(), lr=0.1)
    loss = backbone_forward(torch.randn(4, 3, 64, 64), pair, "side").pow(2).sum()
    opt.zero_grad()
    loss.backward()
    opt.step()
    pair.side.eval()
    assert torch.equal(backbone_forward(probe, pair, "base"), b0)
    assert not torch.equal(backbone_forward(probe, pair, "side"), b0)


def test_base_path_records_no_gradient():
    pair = BackbonePair.build(VisionConfig(**TINY))
    x = torch.randn(1, 3, 64, 64, requires_grad=True)
    assert not backbone_forward(x, pair, "base").requires_grad
    assert isinstance(pair.base, FrozenEncoder)
    before = state_hash(pair.base)
    pair.base.train()
    pair.base(torch.randn(2, 3, 64, 64))
    assert state_hash(pair.base) == before


def test_backbone_shape_error():
    pair = BackbonePair.build(VisionConfig(**TINY))
    with pytest.raises(ShapeError):
        backbone_forward(torch.randn(1, 1, 64, 64), pair)


def _millions(n):
    return n / 1e6


def test_param_report_mobilenet_reference_counts():
    v = VisionConfig()
    finetune = trainable_param_report(build_model(v, None, [0.0, 1.0], 10))
    image_side = trainable_param_report(build_model(v, None, [0.5, 0.5], 10))
    multi = trainable_param_report(build_model(v, TextEncoderConfig(), [0.2, 0.3, 0.5], 10, 1024))
    assert multi["base_trainable"] == 0
    assert multi["trainable"] == multi["total"] - multi["base"]
    parts = multi["base"] + sum(s["trainable"] for s in multi["sides"]) + multi["fc"] + multi["head"]
    assert parts == multi["total"]
    assert multi["sides"][1]["encoder"] == 1_844_736
    assert multi["sides"][1]["adaptation"] == 1536 * 1280 + 1280
    # published figures count the ImageNet classifier of each image network
    assert round(_millions(finetune["trainable_with_imagenet_heads"]), 1) == 3.5
    assert round(_millions(image_side["total_with_imagenet_heads"])) == 7
    assert round(_millions(multi["total_with_imagenet_heads"])) == 12
    assert "adaptation" in format_param_report(multi, "~12M")


def test_param_report_resnet_reference_counts():
    v = VisionConfig("resnet50")
    image_side = trainable_param_report(build_model(v, None, [0.5, 0.5], 10))
    multi = trainable_param_report(build_model(v, TextEncoderConfig(), [0.3, 0.3, 0.4], 10, 512))
    assert round(_millions(image_side["total_with_imagenet_heads"])) == 51
    assert round(_millions(multi["total_with_imagenet_heads"])) == 57
