"""Flat ``key = value`` run configuration and the run manifest.

Example::

    image_root = data/tobacco3482
    text_root  = data/qs-ocr-small
    alphas     = [0.2, 0.3, 0.5]
    fc_width   = 1024
    max_epochs = 100

Lists use ``[a, b, c]``; ``none`` is the null value; ``#`` starts a comment.
Every field has a default, and the manifest written next to each run records
the value actually used for every one of them.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidConfig, MissingRoot
from .fusion import validate_alphas

MODEL_KINDS = ("multimodal", "image", "text")


@dataclass
class RunConfig:
    # data
    image_root: str = ""
    text_root: str = ""
    layout: str = "folder-per-class"
    train_index: str = ""
    val_index: str = ""
    test_index: str = ""
    class_names: list = field(default_factory=list)
    split_seed: int = 0
    split_sizes: list = field(default_factory=lambda: [800, 200, 2482])
    stratified: bool = False
    # model
    model: str = "multimodal"
    backbone: str = "mobilenet_v2"
    pretrained: str = "imagenet"
    width_mult: float = 1.0
    input_side: int = 384
    interpolation: str = "bilinear"
    channel_mean: list = field(default_factory=list)  # empty: computed from the training split
    channel_std: list = field(default_factory=list)
    stats_max_samples: int = 0  # 0: every training image
    alphas: list = field(default_factory=lambda: [0.2, 0.3, 0.5])
    fc_width: typing.Optional[int] = None
    # text
    embeddings: str = ""
    embedding_dim: int = 300
    max_tokens: int = 500
    window_sizes: list = field(default_factory=lambda: [3, 4, 5])
    filters: int = 512
    dropout: float = 0.5
    oov_policy: str = "zero"
    # training
    max_epochs: int = 100
    batch_size: int = 16
    momentum: float = 0.9
    base_lr: float = 0.1
    schedule: str = "printed"
    seed: int = 0
    cache_features: bool = False
    # io / runtime
    out_dir: str = "runs/default"
    ocr_engine: str = "tesseract"
    ocr_lang: str = "eng"
    threads: int = 4
    # sweep
    sweep_fc_widths: list = field(default_factory=lambda: [None, 512, 1024])
    sweep_backbones: list = field(default_factory=lambda: ["mobilenet_v2"])
    sweep_jobs: int = 1

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise InvalidConfig(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.model != "text":
            alpha = validate_alphas(self.alphas)
            expected = 3 if self.model == "multimodal" else 2
            if len(alpha) != expected:
                raise InvalidConfig(f"model={self.model} needs {expected} alphas, got {len(alpha)}")
        if self.layout not in ("folder-per-class", "folder", "index-file", "index"):
            raise InvalidConfig(f"unknown layout {self.layout!r}")
        if len(self.split_sizes) != 3:
            raise InvalidConfig("split_sizes needs three entries")
        if self.oov_policy not in ("zero", "strict"):
            raise InvalidConfig("oov_policy must be 'zero' or 'strict'")
        for name in ("channel_mean", "channel_std"):
            if len(getattr(self, name)) not in (0, 3):
                raise InvalidConfig(f"{name} needs three entries or none")
        return self

    def check_paths(self):
        """Existence checks done at launch, not at parse time."""
        if not self.image_root or not Path(self.image_root).is_dir():
            raise MissingRoot(f"image_root not found: {self.image_root!r}")
        if self.text_root and not Path(self.text_root).is_dir():
            raise MissingRoot(f"text_root not found: {self.text_root!r}")
        if self.layout in ("index", "index-file"):
            for key in ("train_index", "val_index", "test_index"):
                if not Path(getattr(self, key)).is_file():
                    raise MissingRoot(f"{key} not found: {getattr(self, key)!r}")
        if self.model != "image" and not Path(self.embeddings).is_file():
            raise MissingRoot(f"embeddings file not found: {self.embeddings!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_HINTS = typing.get_type_hints(RunConfig)


def _scalar(text: str):
    low = text.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def parse_value(text: str):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise InvalidConfig(f"unterminated list: {text}")
        inner = text[1:-1].strip()
        return [] if not inner else [_scalar(p.strip()) for p in inner.split(",")]
    return _scalar(text)


def _coerce(name, value):
    hint = _HINTS[name]
    try:
        if hint is bool:
            if not isinstance(value, bool):
                raise ValueError
            return value
        if hint is int:
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return "" if value is None else str(value)
        if hint is list:
            return value if isinstance(value, list) else [value]
        if hint == typing.Optional[int]:
            return None if value is None else int(value)
    except (TypeError, ValueError):
        raise InvalidConfig(f"bad value for {name}: {value!r}") from None
    return value


def parse_config_text(text: str, source="<string>") -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise InvalidConfig(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise InvalidConfig(f"{source}:{lineno}: duplicate key {key!r}")
        if _HINTS[key] is str:
            # strings are taken verbatim, so "none" stays "none"
            values[key] = value[1:-1] if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"" else value
        else:
            values[key] = _coerce(key, parse_value(value))
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    """Read a ``.cfg`` file, or a ``manifest.json`` written by a previous run."""
    path = Path(path)
    if not path.is_file():
        raise InvalidConfig(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from None
        data = data.get("config", data)
        unknown = set(data) - set(_FIELDS)
        if unknown:
            raise InvalidConfig(f"{path}: unknown keys {sorted(unknown)}")
        return RunConfig(**{k: _coerce(k, v) for k, v in data.items()})
    return parse_config_text(text, str(path))


def format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(format_value(x) for x in v) + "]"
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in cfg.to_dict().items())


def write_manifest(cfg: RunConfig, out_dir, extra: dict | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), **(extra or {})}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out_dir / "run.cfg").write_text(dump_config(cfg))
    return manifest
