"""Training loop, learning-rate schedule, evaluation, sweeps and profiling."""
from __future__ import annotations

import copy
import hashlib
import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .errors import (
    CheckpointMismatch,
    DivergedLoss,
    EmptyEvalSet,
    FrozenBaseViolation,
    InvalidConfig,
    OutOfRange,
)
from .fusion import AlphaConfig, FusedEncoder, combine, validate_alphas
from .text import EmbeddingTable, TextClassifier, TextEncoderConfig, embed, read_text, tokenize
from .vision import VisionConfig, load_page, preprocess

log = logging.getLogger(__name__)

SCHEDULES = ("printed", "inverted")


@dataclass
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 16
    momentum: float = 0.9
    base_lr: float = 0.1
    seed: int = 0
    checkpoint_dir: str | None = None
    schedule: str = "printed"
    num_workers: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise InvalidConfig("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise InvalidConfig("momentum must be in [0, 1)")
        if not self.base_lr > 0:
            raise InvalidConfig("base_lr must be > 0")
        if self.schedule not in SCHEDULES:
            raise InvalidConfig(f"schedule must be one of {SCHEDULES}")

    @classmethod
    def tobacco(cls, **kw):
        return cls(**{"max_epochs": 100, "batch_size": 16, **kw})

    @classmethod
    def rvl_cdip(cls, **kw):
        return cls(**{"max_epochs": 10, "batch_size": 40, **kw})


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Learning rate at a (possibly fractional) epoch.

    ``printed``: ``base_lr * sqrt(epoch / max_epochs)``, which starts at zero
    and rises to ``base_lr``. ``inverted``: ``base_lr * sqrt(1 - epoch / max_epochs)``.
    """
    if not 0 <= epoch <= cfg.max_epochs:
        raise OutOfRange(f"epoch {epoch} outside [0, {cfg.max_epochs}]")
    frac = epoch / cfg.max_epochs
    if cfg.schedule == "inverted":
        frac = 1.0 - frac
    return cfg.base_lr * math.sqrt(frac)


def state_hash(module: torch.nn.Module) -> str:
    """SHA-256 over parameter and buffer names, dtypes, shapes and raw bytes."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()


class Featurizer:
    """Turns a :class:`DocumentSample` into model inputs."""

    def __init__(self, vision: VisionConfig, text: TextEncoderConfig | None = None,
                 table: EmbeddingTable | None = None, oov_policy: str = "zero"):
        if text is not None and table is None:
            raise InvalidConfig("a text encoder needs an embedding table")
        if text is not None and table.dim != text.embedding_dim:
            raise InvalidConfig(f"embedding table is {table.dim}-d, text encoder expects {text.embedding_dim}")
        self.vision = vision
        self.text = text
        self.table = table
        self.oov_policy = oov_policy
        self.oov_count = 0

    def image(self, path) -> torch.Tensor:
        return preprocess(load_page(path), self.vision)

    def text_matrix(self, raw: str) -> torch.Tensor:
        if self.text is None:
            return torch.zeros(0)
        m = embed(tokenize(raw or ""), self.table, self.text.max_tokens, self.oov_policy)
        self.oov_count += m.oov_count
        return torch.from_numpy(m.rows)

    def sample(self, s):
        text = s.text
        if text is None and s.text_path:
            text = read_text(s.text_path)
        return self.image(s.image_path), self.text_matrix(text or ""), s.label


class DocumentDataset(Dataset):
    def __init__(self, samples, featurizer: Featurizer, cache: bool = False):
        self.samples = list(samples)
        self.featurizer = featurizer
        self.cache = {} if cache else None

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        if self.cache is not None and i in self.cache:
            return self.cache[i]
        item = self.featurizer.sample(self.samples[i])
        if self.cache is not None:
            self.cache[i] = item
        return item


def forward(model, image, text):
    if isinstance(model, TextClassifier):
        return model(text)
    if isinstance(model, FusedEncoder) and "text" not in model.modalities:
        return model(image)
    return model(image, text)


@dataclass
class EvalReport:
    overall_accuracy: float
    per_class_accuracy: dict
    confusion: np.ndarray
    num_samples: int
    class_names: list

    def to_dict(self):
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": dict(self.per_class_accuracy),
            "confusion": self.confusion.tolist(),
            "num_samples": self.num_samples,
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["overall_accuracy"], dict(d["per_class_accuracy"]),
                   np.asarray(d["confusion"], dtype=np.int64), d["num_samples"], list(d["class_names"]))


def report_from_predictions(labels, predictions, class_names) -> EvalReport:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.size == 0:
        raise EmptyEvalSet("no samples to evaluate")
    c = len(class_names)
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    support = confusion.sum(axis=1)
    per_class = {class_names[k]: float(confusion[k, k] / support[k]) for k in range(c) if support[k] > 0}
    oa = float(np.trace(confusion) / labels.size)
    return EvalReport(oa, per_class, confusion, int(labels.size), list(class_names))


@torch.no_grad()
def predict(model, loader):
    model.eval()
    labels, preds, losses = [], [], []
    for image, text, y in loader:
        scores = forward(model, image, text)
        losses.append(F.cross_entropy(scores, y, reduction="sum").item())
        preds.append(torch.argmax(scores, dim=1))
        labels.append(y)
    labels = torch.cat(labels).numpy()
    preds = torch.cat(preds).numpy()
    return labels, preds, sum(losses) / max(len(labels), 1)


def evaluate(model, samples, featurizer: Featurizer, class_names, batch_size=16) -> EvalReport:
    samples = list(samples)
    if not samples:
        raise EmptyEvalSet("evaluation set is empty")
    loader = DataLoader(DocumentDataset(samples, featurizer), batch_size=batch_size, shuffle=False)
    labels, preds, _ = predict(model, loader)
    return report_from_predictions(labels, preds, class_names)


def save_checkpoint(path, model, meta: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"state_dict": model.state_dict(), **meta}
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointMismatch(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_accuracy: float | None = None
    base_hash_before: str | None = None
    base_hash_after: str | None = None


def make_optimizer(params, cfg: TrainConfig):
    # v <- momentum * v + g ; w <- w - lr * v  (no dampening, no nesterov, no decay)
    return torch.optim.SGD(params, lr=0.0, momentum=cfg.momentum, dampening=0.0,
                           nesterov=False, weight_decay=0.0)


def _seeded_loader(dataset, cfg: TrainConfig, shuffle):
    gen = torch.Generator()
    gen.manual_seed(cfg.seed)
    return DataLoader(dataset, batch_size=cfg.batch_size, shuffle=shuffle, generator=gen,
                      num_workers=cfg.num_workers)


def train(model, split, cfg: TrainConfig, featurizer: Featurizer, meta: dict | None = None,
          cache: bool = False, on_epoch=None):
    """SGD with momentum and the per-iteration schedule; keeps the best-val weights.

    The schedule is evaluated at the fractional epoch
    ``completed_minibatches / minibatches_per_epoch``. After the last epoch the
    weights with the best validation accuracy (last epoch if there is no
    validation set) are loaded back into ``model``. Returns ``(model, history)``.
    """
    if not split.train:
        raise EmptyEvalSet("training set is empty")
    if isinstance(model, FusedEncoder):
        validate_alphas(model.alpha.alphas)
    torch.manual_seed(cfg.seed)
    base = getattr(model, "base", None)
    history = History()
    if base is not None:
        history.base_hash_before = state_hash(base)

    train_loader = _seeded_loader(DocumentDataset(split.train, featurizer, cache), cfg, True)
    val_loader = None
    if split.val:
        val_loader = DataLoader(DocumentDataset(split.val, featurizer, cache), batch_size=cfg.batch_size)
    opt = make_optimizer([p for p in model.parameters() if p.requires_grad], cfg)
    steps_per_epoch = len(train_loader)
    step = 0
    best_state = None
    ckpt_path = Path(cfg.checkpoint_dir) / "best.pt" if cfg.checkpoint_dir else None
    meta = dict(meta or {})

    for epoch in range(cfg.max_epochs):
        model.train()
        t0 = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        for image, text, y in train_loader:
            lr = lr_at(step / steps_per_epoch, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            scores = forward(model, image, text)
            loss = F.cross_entropy(scores, y)
            if not torch.isfinite(loss):
                if cfg.checkpoint_dir:
                    save_checkpoint(Path(cfg.checkpoint_dir) / "last_finite.pt", model,
                                    {**meta, "epoch": epoch, "step": step})
                raise DivergedLoss(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            loss_sum += loss.item() * y.numel()
            correct += int((scores.argmax(1) == y).sum())
            seen += y.numel()
        record = {
            "epoch": epoch + 1,
            "lr_end": lr_at(step / steps_per_epoch, cfg),
            "train_loss": loss_sum / seen,
            "train_accuracy": correct / seen,
            "seconds": time.perf_counter() - t0,
        }
        if val_loader is not None:
            labels, preds, vloss = predict(model, val_loader)
            record["val_loss"] = vloss
            record["val_accuracy"] = float((labels == preds).mean())
            improved = history.best_val_accuracy is None or record["val_accuracy"] > history.best_val_accuracy
        else:
            improved = True
        if improved:
            history.best_epoch = epoch + 1
            history.best_val_accuracy = record.get("val_accuracy")
            best_state = copy.deepcopy(model.state_dict())
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, model, {**meta, "epoch": epoch + 1,
                                                   "val_accuracy": record.get("val_accuracy")})
        history.epochs.append(record)
        log.info("epoch %d: %s", epoch + 1, {k: round(v, 4) for k, v in record.items()})
        if on_epoch is not None:
            on_epoch(record)

    if best_state is not None:
        model.load_state_dict(best_state)
    if base is not None:
        history.base_hash_after = state_hash(base)
        if history.base_hash_after != history.base_hash_before:
            raise FrozenBaseViolation("base encoder weights changed during training")
    model.eval()
    return model, history


@dataclass
class SweepRow:
    backbone: str
    fc_width: int | None
    alpha: AlphaConfig
    report: EvalReport

    @property
    def variant(self):
        return "no-fc" if self.fc_width is None else f"fc{self.fc_width}"


def sweep_alphas(grid, variants, backbones, run_one, jobs: int = 1):
    """Train/evaluate every (backbone, fc variant, alpha) combination.

    ``run_one(alpha, fc_width, backbone, job_index)`` must return an
    :class:`EvalReport`. All alphas are validated before anything runs. Rows
    come back grouped by backbone and variant with alpha_2 (the text weight)
    nondecreasing inside each group; ties keep grid order.
    """
    alphas = [a if isinstance(a, AlphaConfig) else validate_alphas(a) for a in grid]
    jobs_list = [(b, fc, a) for b in backbones for fc in variants for a in alphas]

    def _run(item):
        i, (b, fc, a) = item
        return SweepRow(b, fc, a, run_one(a, fc, b, i))

    if jobs <= 1:
        rows = [_run(item) for item in enumerate(jobs_list)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run, enumerate(jobs_list)))
    order_b = {b: i for i, b in enumerate(backbones)}
    order_v = {v: i for i, v in enumerate(variants)}
    order_a = {id(a): i for i, a in enumerate(alphas)}
    rows.sort(key=lambda r: (order_b[r.backbone], order_v[r.fc_width],
                             r.alpha.alphas[-1], order_a[id(r.alpha)]))
    return rows


def best_row(rows):
    return max(rows, key=lambda r: r.report.overall_accuracy)


@dataclass
class TimingBreakdown:
    ocr_ms: float = 0.0
    image_load_ms: float = 0.0
    text_load_ms: float = 0.0
    base_ms: float = 0.0
    side_image_ms: float = 0.0
    side_text_ms: float = 0.0
    total_ms: float = 0.0
    runs: int = 1

    STAGES = ("ocr_ms", "image_load_ms", "text_load_ms", "base_ms", "side_image_ms", "side_text_ms")

    def stage_sum(self):
        return sum(getattr(self, s) for s in self.STAGES)

    def to_dict(self):
        return asdict(self)


def _ms(t0):
    return (time.perf_counter() - t0) * 1000.0


@torch.no_grad()
def profile_inference(model: FusedEncoder, featurizer: Featurizer, image_path, text_path=None,
                      ocr=None, runs: int = 5):
    """Wall-clock timing of every stage of single-document inference.

    Text comes from ``text_path`` when given (OCR time is then 0), otherwise
    from ``ocr``. Returns ``(breakdown averaged over runs, last score vector)``.
    """
    if runs < 1:
        raise InvalidConfig("runs must be >= 1")
    model.eval()
    sums = {s: 0.0 for s in TimingBreakdown.STAGES}
    sums["total_ms"] = 0.0
    scores = None
    needs_text = "text" in model.modalities
    for _ in range(runs):
        t_total = time.perf_counter()
        raw = ""
        if needs_text and text_path is None:
            if ocr is None:
                raise InvalidConfig("no text file given and no OCR client configured")
            t0 = time.perf_counter()
            raw = ocr.run(image_path).text
            sums["ocr_ms"] += _ms(t0)
        t0 = time.perf_counter()
        image = featurizer.image(image_path).unsqueeze(0)
        sums["image_load_ms"] += _ms(t0)
        text = None
        if needs_text:
            t0 = time.perf_counter()
            if text_path is not None:
                raw = read_text(text_path)
            text = featurizer.text_matrix(raw).unsqueeze(0)
            sums["text_load_ms"] += _ms(t0)
        t0 = time.perf_counter()
        encs = [model.base(image)]
        sums["base_ms"] += _ms(t0)
        for side, mod in zip(model.sides, model.modalities):
            t0 = time.perf_counter()
            encs.append(side(image if mod == "image" else text))
            sums["side_image_ms" if mod == "image" else "side_text_ms"] += _ms(t0)
        scores = model.head(combine(encs, model.alpha))[0]
        sums["total_ms"] += _ms(t_total)
    return TimingBreakdown(**{k: v / runs for k, v in sums.items()}, runs=runs), scores


def check_compatible(ckpt: dict, class_names=None, backbone=None):
    saved = ckpt.get("class_names")
    if class_names is not None and saved is not None and len(saved) != len(class_names):
        raise CheckpointMismatch(f"checkpoint has {len(saved)} classes, data has {len(class_names)}")
    if backbone is not None and ckpt.get("backbone") not in (None, backbone):
        raise CheckpointMismatch(f"checkpoint backbone {ckpt.get('backbone')} != {backbone}")
