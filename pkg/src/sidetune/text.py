"""OCR text to embedded token matrix, and the sentence-classification CNN."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DataError, MissingToken, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TextEncoderConfig:
    window_sizes: tuple = (3, 4, 5)
    filters_per_window: int = 512
    dropout_prob: float = 0.5
    embedding_dim: int = 300
    max_tokens: int = 500
    num_classes: int = 10

    @property
    def out_dim(self) -> int:
        return len(self.window_sizes) * self.filters_per_window


def tokenize(raw_text: str) -> list[str]:
    # str.split() with no argument splits on runs of any whitespace and drops
    # empty strings, which is exactly the rule wanted: no other normalization
    return raw_text.split()


class EmbeddingTable:
    """Frozen token -> vector lookup.

    Loaded from a plain-text file (``token v1 ... vk`` per line, an optional
    fastText-style ``count dim`` header is skipped). On first load a binary
    sidecar is written next to the source (``.npy`` matrix + ``.vocab.json``)
    and later loads memory-map it.
    """

    def __init__(self, vocab: dict, vectors: np.ndarray, source: str = "memory"):
        if vectors.ndim != 2:
            raise DataError("embedding matrix must be 2-d")
        if not np.all(np.isfinite(vectors)):
            raise DataError("embedding table contains non-finite values")
        self.vocab = vocab
        self.vectors = vectors
        self.source = source

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.vocab)

    def __contains__(self, token):
        return token in self.vocab

    def __getitem__(self, token):
        return self.vectors[self.vocab[token]]

    @classmethod
    def from_dict(cls, mapping: dict, source="memory"):
        tokens = list(mapping)
        vectors = np.asarray([mapping[t] for t in tokens], dtype=np.float32)
        return cls({t: i for i, t in enumerate(tokens)}, vectors, source)

    @staticmethod
    def sidecar_paths(path):
        path = Path(path)
        return path.with_name(path.name + ".npy"), path.with_name(path.name + ".vocab.json")

    @classmethod
    def load(cls, path, dim: int = 300, use_sidecar: bool = True):
        path = Path(path)
        if not path.exists():
            raise DataError(f"embedding file not found: {path}")
        npy, vocab_file = cls.sidecar_paths(path)
        src_mtime = path.stat().st_mtime
        if use_sidecar and npy.exists() and vocab_file.exists() and npy.stat().st_mtime >= src_mtime:
            vectors = np.load(npy, mmap_mode="r")
            with open(vocab_file, encoding="utf-8") as f:
                tokens = json.load(f)
            if vectors.shape == (len(tokens), dim):
                return cls({t: i for i, t in enumerate(tokens)}, vectors, str(path))
            log.warning("sidecar for %s has shape %s, rebuilding", path, vectors.shape)

        tokens, rows = [], []
        with open(path, encoding="utf-8", errors="surrogateescape") as f:
            for lineno, line in enumerate(f):
                parts = line.rstrip("\n").split(" ")
                parts = [p for p in parts if p != ""]
                if not parts:
                    continue
                if lineno == 0 and len(parts) == 2 and all(p.isdigit() for p in parts):
                    continue
                if len(parts) != dim + 1:
                    raise DataError(f"{path}:{lineno + 1}: expected token + {dim} floats, got {len(parts) - 1}")
                tokens.append(parts[0])
                rows.append(np.asarray(parts[1:], dtype=np.float32))
        vectors = np.stack(rows) if rows else np.zeros((0, dim), np.float32)
        vocab = {}
        for i, t in enumerate(tokens):
            vocab.setdefault(t, i)
        table = cls(vocab, vectors, str(path))
        if use_sidecar:
            try:
                np.save(npy, vectors)
                with open(vocab_file, "w", encoding="utf-8") as f:
                    json.dump(tokens, f)
            except OSError as exc:
                log.warning("could not write embedding sidecar: %s", exc)
        return table


@dataclass
class TokenMatrix:
    rows: np.ndarray
    true_length: int
    oov_count: int = 0
    oov_tokens: list = field(default_factory=list)


def embed(tokens, table: EmbeddingTable, max_tokens: int = 500, oov_policy: str = "zero") -> TokenMatrix:
    """Look up each token and zero-pad (or head-truncate) to ``max_tokens`` rows."""
    if oov_policy not in ("zero", "strict"):
        raise ValueError(f"unknown OOV policy {oov_policy!r}")
    n = min(len(tokens), max_tokens)
    rows = np.zeros((max_tokens, table.dim), dtype=np.float32)
    oov = []
    for i, tok in enumerate(tokens[:n]):
        idx = table.vocab.get(tok)
        if idx is None:
            if oov_policy == "strict":
                raise MissingToken(f"token {tok!r} not in embedding table")
            oov.append(tok)
            continue
        rows[i] = table.vectors[idx]
    return TokenMatrix(rows, n, len(oov), oov)


class TextCNN(nn.Module):
    """Parallel valid convolutions over the token axis, ReLU, global max-pool.

    Input is ``(batch, max_tokens, embedding_dim)``; output is the
    concatenation of the pooled vectors in ascending window order.
    """

    def __init__(self, cfg: TextEncoderConfig = TextEncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.convs = nn.ModuleList(
            nn.Conv1d(cfg.embedding_dim, cfg.filters_per_window, kernel_size=h)
            for h in sorted(cfg.window_sizes)
        )
        self.dropout = nn.Dropout(cfg.dropout_prob)

    @property
    def out_dim(self):
        return self.cfg.out_dim

    def _check(self, x):
        if x.ndim == 2:
            x = x.unsqueeze(0)
        expected = (self.cfg.max_tokens, self.cfg.embedding_dim)
        if x.ndim != 3 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"token matrix must be (*, {expected[0]}, {expected[1]}), got {tuple(x.shape)}")
        return x

    def feature_maps(self, x, check: bool = True):
        """Post-ReLU activations per window, each ``(batch, filters, L - h + 1)``.

        ``check=False`` accepts any number of token rows, which is only useful
        for probing the encoder on unpadded documents.
        """
        x = self._check(x) if check else (x.unsqueeze(0) if x.ndim == 2 else x)
        x = x.transpose(1, 2)
        return [torch.relu(conv(x)) for conv in self.convs]

    def forward(self, x):
        pooled = [m.amax(dim=2) for m in self.feature_maps(x)]
        return self.dropout(torch.cat(pooled, dim=1))


def text_forward(matrix, encoder: TextCNN):
    """Encode one :class:`TokenMatrix` (or a tensor batch) into a 1-d/2-d encoding."""
    if isinstance(matrix, TokenMatrix):
        x = torch.from_numpy(np.ascontiguousarray(matrix.rows))
        x = x.to(next(encoder.parameters()).dtype)
        return encoder(x.unsqueeze(0))[0]
    return encoder(matrix)


class TextClassifier(nn.Module):
    """Standalone text baseline: CNN encoder, dropout, linear head."""

    def __init__(self, cfg: TextEncoderConfig = TextEncoderConfig()):
        super().__init__()
        self.encoder = TextCNN(cfg)
        self.head = nn.Linear(cfg.out_dim, cfg.num_classes)

    def forward(self, x):
        return self.head(self.encoder(x))


def count_text_params(cfg: TextEncoderConfig = TextEncoderConfig(), with_head: bool = True) -> int:
    """Closed-form trainable parameter count of the text classifier."""
    k, f = cfg.embedding_dim, cfg.filters_per_window
    conv = sum(f * k * h + f for h in cfg.window_sizes)
    if not with_head:
        return conv
    return conv + cfg.out_dim * cfg.num_classes + cfg.num_classes


def read_text(path, encoding="utf-8") -> str:
    with open(path, encoding=encoding, errors="replace") as f:
        return f.read()

