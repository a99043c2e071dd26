"""Glue from a :class:`RunConfig` to data, model, training and reports."""
from __future__ import annotations

import logging
import random
from pathlib import Path

import torch

from . import reporting
from .config import RunConfig, write_manifest
from .data import OcrClient, load_corpus, split_random
from .errors import CheckpointMismatch, InvalidConfig
from .fusion import validate_alphas
from .model import build_model
from .text import EmbeddingTable, TextClassifier, TextEncoderConfig
from .training import (
    Featurizer,
    TrainConfig,
    check_compatible,
    evaluate,
    load_checkpoint,
    profile_inference,
    save_checkpoint,
    sweep_alphas,
    train,
)
from .vision import VisionConfig, channel_stats

log = logging.getLogger(__name__)

# twelve configurations, values in [0.2, 0.5] on a 0.1 grid, every component
# weighted at least 0.2; includes the three configurations singled out in the
# reported results. Sorted by alpha_2 (text weight), then alpha_0.
DEFAULT_GRID = [
    (0.3, 0.5, 0.2), (0.4, 0.4, 0.2), (0.5, 0.3, 0.2),
    (0.2, 0.5, 0.3), (0.3, 0.4, 0.3), (0.4, 0.3, 0.3), (0.5, 0.2, 0.3),
    (0.2, 0.4, 0.4), (0.3, 0.3, 0.4), (0.4, 0.2, 0.4),
    (0.2, 0.3, 0.5), (0.3, 0.2, 0.5),
]


def parse_grid(text: str):
    """One alpha configuration per line, comma and/or space separated."""
    grid = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip().strip("[]")
        if not line:
            continue
        try:
            values = [float(v) for v in line.replace(",", " ").split()]
        except ValueError:
            raise InvalidConfig(f"grid line {lineno}: not a list of numbers") from None
        grid.append(values)
    if not grid:
        raise InvalidConfig("grid is empty")
    return grid


def load_grid(path):
    if path is None:
        return [list(a) for a in DEFAULT_GRID]
    return parse_grid(Path(path).read_text(encoding="utf-8"))


def text_config(cfg: RunConfig, num_classes: int) -> TextEncoderConfig:
    return TextEncoderConfig(tuple(int(h) for h in cfg.window_sizes), cfg.filters, cfg.dropout,
                             cfg.embedding_dim, cfg.max_tokens, num_classes)


def vision_config(cfg: RunConfig, mean=None, std=None, backbone=None, pretrained=None) -> VisionConfig:
    kw = {}
    if mean is not None:
        kw = {"channel_mean": tuple(mean), "channel_std": tuple(std)}
    return VisionConfig(backbone or cfg.backbone, cfg.input_side, interpolation=cfg.interpolation,
                        width_mult=cfg.width_mult,
                        pretrained=cfg.pretrained if pretrained is None else pretrained, **kw)


def load_split(cfg: RunConfig):
    if cfg.layout in ("index", "index-file"):
        return load_corpus(cfg.image_root, cfg.text_root or None, "index-file",
                           {"train": cfg.train_index, "val": cfg.val_index, "test": cfg.test_index},
                           cfg.class_names or None)
    corpus = load_corpus(cfg.image_root, cfg.text_root or None, "folder-per-class")
    split = split_random(corpus.samples, cfg.split_seed, cfg.split_sizes, corpus.class_names,
                         cfg.stratified)
    split.missing_text = corpus.missing_text
    return split


def training_stats(cfg: RunConfig, split):
    if cfg.channel_mean:
        return tuple(cfg.channel_mean), tuple(cfg.channel_std)
    paths = [s.image_path for s in split.train]
    if cfg.stats_max_samples and len(paths) > cfg.stats_max_samples:
        paths = random.Random(cfg.split_seed).sample(sorted(paths), cfg.stats_max_samples)
    return channel_stats(paths, vision_config(cfg))


def make_model(cfg: RunConfig, vision: VisionConfig, num_classes: int):
    if cfg.model == "text":
        return TextClassifier(text_config(cfg, num_classes))
    text = text_config(cfg, num_classes) if cfg.model == "multimodal" else None
    return build_model(vision, text, cfg.alphas, num_classes, cfg.fc_width, image_side=True)


def make_featurizer(cfg: RunConfig, vision: VisionConfig, num_classes: int, table=None):
    if cfg.model == "image":
        return Featurizer(vision)
    if table is None:
        table = EmbeddingTable.load(cfg.embeddings, cfg.embedding_dim)
    return Featurizer(vision, text_config(cfg, num_classes), table, cfg.oov_policy)


def _meta(cfg, split, vision, model, featurizer):
    return {
        "run_config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "class_names": list(split.class_names),
        "split_seed": split.seed,
        "backbone": vision.backbone,
        "backbone_checkpoint": getattr(model, "backbone_checkpoint", None),
        "embedding_source": featurizer.table.source if featurizer.table is not None else None,
        "channel_mean": list(vision.channel_mean),
        "channel_std": list(vision.channel_std),
    }


def run_training(cfg: RunConfig, split=None, table=None, figures=True):
    """Data -> model -> train -> checkpoint, history, manifest, test report."""
    cfg.validate()
    if split is None:
        cfg.check_paths()
        split = load_split(cfg)
    torch.manual_seed(cfg.seed)
    mean, std = training_stats(cfg, split)
    vision = vision_config(cfg, mean, std)
    model = make_model(cfg, vision, split.num_classes)
    featurizer = make_featurizer(cfg, vision, split.num_classes, table)
    out = Path(cfg.out_dir)
    tcfg = TrainConfig(cfg.max_epochs, cfg.batch_size, cfg.momentum, cfg.base_lr, cfg.seed,
                       str(out), cfg.schedule)
    meta = _meta(cfg, split, vision, model, featurizer)
    write_manifest(cfg, out, {k: v for k, v in meta.items() if k not in ("run_config",)})
    model, history = train(model, split, tcfg, featurizer, meta, cache=cfg.cache_features)
    save_checkpoint(out / "checkpoint.pt", model, {**meta, "best_epoch": history.best_epoch})
    artifacts = {"checkpoint": out / "checkpoint.pt", "history": reporting.write_history(history, out, figures)}
    if split.test:
        report = evaluate(model, split.test, featurizer, split.class_names, cfg.batch_size)
        artifacts["test"] = reporting.write_eval_report(report, out, "eval_test", cfg.model, figures)
        artifacts["report"] = report
    artifacts["history_obj"] = history
    artifacts["model"] = model
    return artifacts


def restore(checkpoint_path, cfg_override: RunConfig | None = None):
    """Rebuild the model and featurizer stored in a checkpoint."""
    ckpt = load_checkpoint(checkpoint_path)
    cfg = RunConfig(**ckpt["run_config"])
    class_names = ckpt["class_names"]
    if cfg_override is not None:
        check_compatible(ckpt, backbone=vision_config(cfg_override, pretrained="none").backbone
                         if cfg_override.model != "text" else None)
        if cfg_override.model != cfg.model:
            raise CheckpointMismatch(f"checkpoint model kind {cfg.model} != {cfg_override.model}")
    vision = vision_config(cfg, ckpt["channel_mean"], ckpt["channel_std"], pretrained="none")
    model = make_model(cfg, vision, len(class_names))
    try:
        model.load_state_dict(ckpt["state_dict"])
    except RuntimeError as exc:
        raise CheckpointMismatch(f"weights do not fit the stored configuration: {exc}") from None
    model.eval()
    featurizer = make_featurizer(cfg, vision, len(class_names))
    return model, featurizer, cfg, ckpt


def run_eval(checkpoint_path, split_name="test", cfg_override=None, out_dir=None, figures=True):
    model, featurizer, cfg, ckpt = restore(checkpoint_path, cfg_override)
    data_cfg = cfg_override or cfg
    if cfg_override is not None:
        data_cfg.check_paths()
    split = load_split(data_cfg)
    check_compatible(ckpt, class_names=split.class_names)
    report = evaluate(model, split.part(split_name), featurizer, ckpt["class_names"], cfg.batch_size)
    out = Path(out_dir or Path(checkpoint_path).parent)
    paths = reporting.write_eval_report(report, out, f"eval_{split_name}", cfg.model, figures)
    return report, paths


def run_sweep(cfg: RunConfig, grid, jobs=None, split=None, table=None, figures=True):
    """Alpha x head-variant x backbone sweep on one split; writes table and plots."""
    alphas = [validate_alphas(a) for a in grid]  # fail fast, before any training
    for a in alphas:
        if len(a) != 3:
            raise InvalidConfig(f"sweep alphas need 3 coefficients, got {a.alphas}")
    variants = [None if v is None else int(v) for v in cfg.sweep_fc_widths]
    backbones = list(cfg.sweep_backbones)
    for b in backbones:
        vision_config(cfg, backbone=b)
    if split is None:
        cfg.check_paths()
        split = load_split(cfg)
    if table is None:
        table = EmbeddingTable.load(cfg.embeddings, cfg.embedding_dim)
    out = Path(cfg.out_dir)

    def run_one(alpha, fc, backbone, index):
        sub = out / backbone / ("no-fc" if fc is None else f"fc{fc}") / alpha.label().replace("/", "_")
        job = cfg.replace(model="multimodal", alphas=list(alpha.alphas), fc_width=fc, backbone=backbone,
                          out_dir=str(sub), seed=cfg.seed + index)
        return run_training(job, split=split, table=table, figures=False)["report"]

    rows = sweep_alphas(alphas, variants, backbones, run_one, jobs or cfg.sweep_jobs)
    paths = reporting.write_sweep(rows, out, figures)
    return rows, paths


def run_profile(checkpoint_path, image_path, text_path=None, runs=5, ocr_engine=None, threads=None):
    model, featurizer, cfg, ckpt = restore(checkpoint_path)
    if isinstance(model, TextClassifier):
        raise InvalidConfig("profiling needs a fused image model")
    ocr = None
    if text_path is None:
        ocr = OcrClient(ocr_engine or cfg.ocr_engine, cfg.ocr_lang, threads or cfg.threads)
    breakdown, scores = profile_inference(model, featurizer, image_path, text_path, ocr, runs)
    return breakdown, scores, ckpt["class_names"]
