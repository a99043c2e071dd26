"""Paired image/text corpora, split protocols and the OCR client."""
from __future__ import annotations

import logging
import os
import random
import shutil
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    EmptyCorpus,
    EngineMissing,
    LayoutMismatch,
    MissingRoot,
    OcrFailure,
    SizeMismatch,
    Timeout,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".tif", ".tiff", ".png", ".jpg", ".jpeg")
TOBACCO_SIZES = (800, 200, 2482)
RVL_SIZES = (319837, 39995, 39996)


@dataclass(frozen=True)
class DocumentSample:
    image_path: str
    text: str | None
    label: int
    text_path: str | None = None

    @property
    def stem(self):
        return Path(self.image_path).stem


@dataclass
class Corpus:
    samples: list
    class_names: list
    missing_text: int = 0

    def __len__(self):
        return len(self.samples)


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    class_names: list
    seed: int | None = None
    missing_text: int = 0

    @property
    def num_classes(self):
        return len(self.class_names)

    def part(self, name):
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _read(path):
    with open(path, encoding="utf-8", errors="replace") as f:
        return f.read()


def _pair_text(image_path: Path, text_dir: Path | None, counter: list):
    if text_dir is not None:
        candidate = text_dir / (image_path.stem + ".txt")
        if candidate.is_file():
            return _read(candidate), str(candidate)
    counter[0] += 1
    return "", None


def load_folder_corpus(image_root, text_root=None) -> Corpus:
    image_root = Path(image_root)
    if not image_root.is_dir():
        raise MissingRoot(f"image root not found: {image_root}")
    text_root = Path(text_root) if text_root else None
    if text_root is not None and not text_root.is_dir():
        raise MissingRoot(f"text root not found: {text_root}")

    class_dirs = sorted(p for p in image_root.iterdir() if p.is_dir())
    if not class_dirs:
        loose = [p for p in image_root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES]
        if loose:
            raise LayoutMismatch(f"{image_root} holds images but no class subdirectories")
        raise EmptyCorpus(f"no class directories under {image_root}")
    class_names = [p.name for p in class_dirs]
    samples = []
    missing = [0]
    for label, cdir in enumerate(class_dirs):
        tdir = text_root / cdir.name if text_root is not None else None
        for img in sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            text, tpath = _pair_text(img, tdir, missing)
            samples.append(DocumentSample(str(img), text, label, tpath))
    if not samples:
        raise EmptyCorpus(f"no images under {image_root}")
    if missing[0]:
        log.warning("%d of %d samples have no text file; using empty text", missing[0], len(samples))
    return Corpus(samples, class_names, missing[0])


def read_index(index_file, image_root, text_root=None, class_names=None, counter=None):
    """Parse ``relative/path label`` lines (RVL-CDIP style)."""
    index_file = Path(index_file)
    if not index_file.is_file():
        raise MissingRoot(f"index file not found: {index_file}")
    image_root = Path(image_root)
    text_root = Path(text_root) if text_root else None
    counter = counter if counter is not None else [0]
    samples = []
    with open(index_file, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.rsplit(maxsplit=1)
            if len(parts) != 2 or not parts[1].lstrip("-").isdigit():
                raise LayoutMismatch(f"{index_file}:{lineno}: expected '<path> <label>'")
            rel, label = parts[0], int(parts[1])
            if class_names is not None and not 0 <= label < len(class_names):
                raise LayoutMismatch(f"{index_file}:{lineno}: label {label} outside [0, {len(class_names)})")
            img = image_root / rel
            tdir = (text_root / rel).parent if text_root is not None else None
            text, tpath = _pair_text(img, tdir, counter)
            samples.append(DocumentSample(str(img), text, label, tpath))
    return samples


def load_corpus(image_root, text_root=None, layout="folder-per-class", index_files=None,
                class_names=None):
    """Load a corpus.

    Folder layout returns a :class:`Corpus`. Index layout returns a
    :class:`DatasetSplit` built from the per-split index files, because those
    datasets ship with fixed splits.
    """
    if layout in ("folder", "folder-per-class"):
        return load_folder_corpus(image_root, text_root)
    if layout not in ("index", "index-file"):
        raise LayoutMismatch(f"unknown layout {layout!r}")
    if not Path(image_root).is_dir():
        raise MissingRoot(f"image root not found: {image_root}")
    if text_root and not Path(text_root).is_dir():
        raise MissingRoot(f"text root not found: {text_root}")
    if not index_files or any(k not in index_files for k in ("train", "val", "test")):
        raise LayoutMismatch("index layout needs train, val and test index files")
    counter = [0]
    parts = {k: read_index(index_files[k], image_root, text_root, class_names, counter)
             for k in ("train", "val", "test")}
    total = sum(len(v) for v in parts.values())
    if total == 0:
        raise EmptyCorpus("index files list no samples")
    if class_names is None:
        n = 1 + max(s.label for v in parts.values() for s in v)
        class_names = [str(i) for i in range(n)]
    if counter[0]:
        log.warning("%d of %d samples have no text file; using empty text", counter[0], total)
    return DatasetSplit(parts["train"], parts["val"], parts["test"], list(class_names), None, counter[0])


def split_random(samples, seed: int, sizes=TOBACCO_SIZES, class_names=None,
                 stratified: bool = False) -> DatasetSplit:
    """Shuffle under ``seed`` and cut into train/val/test of the given sizes.

    With ``stratified`` the per-class proportions of each part follow the
    corpus (largest-remainder rounding); off by default.
    """
    samples = list(samples)
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or any(s < 0 for s in sizes):
        raise SizeMismatch(f"need three nonnegative sizes, got {sizes}")
    if sum(sizes) != len(samples):
        raise SizeMismatch(f"sizes {sizes} sum to {sum(sizes)}, corpus has {len(samples)} samples")
    # sort first so the result depends only on membership, not on input order
    samples.sort(key=lambda s: (s.label, s.image_path))
    rng = random.Random(seed)
    if not stratified:
        rng.shuffle(samples)
        a, b, _ = sizes
        parts = samples[:a], samples[a:a + b], samples[a + b:]
    else:
        parts = _stratified(samples, sizes, rng)
    if class_names is None:
        n = 1 + max((s.label for s in samples), default=-1)
        class_names = [str(i) for i in range(n)]
    return DatasetSplit(list(parts[0]), list(parts[1]), list(parts[2]), list(class_names), seed)


def _stratified(samples, sizes, rng):
    by_class = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    n = len(samples)
    quotas = {}
    for k, size in enumerate(sizes[:2]):
        raw = {c: size * len(v) / n for c, v in by_class.items()}
        q = {c: int(r) for c, r in raw.items()}
        short = size - sum(q.values())
        for c in sorted(raw, key=lambda c: (-(raw[c] - q[c]), c))[:short]:
            q[c] += 1
        quotas[k] = q
    train, val, test = [], [], []
    for c in sorted(by_class):
        items = by_class[c][:]
        rng.shuffle(items)
        a = quotas[0][c]
        b = min(quotas[1][c], len(items) - a)
        train += items[:a]
        val += items[a:a + b]
        test += items[a + b:]
    for part in (train, val, test):
        rng.shuffle(part)
    if (len(train), len(val)) != sizes[:2]:
        raise SizeMismatch("stratified quotas could not meet the requested sizes")
    return train, val, test


@dataclass
class OcrResult:
    image_path: str
    text: str
    duration_ms: float


@dataclass
class OcrClient:
    """Runs an external OCR engine (tesseract CLI conventions) as a subprocess.

    The engine is called as ``<engine> <image> stdout -l <lang>`` and must write
    the recognized text to stdout. ``threads`` sets the engine's internal
    thread budget through ``OMP_THREAD_LIMIT``; ``workers`` bounds how many
    pages are processed concurrently by :meth:`run_many`.
    """

    engine: str = "tesseract"
    lang: str = "eng"
    threads: int = 4
    workers: int = 1
    timeout: float = 120.0
    durations: list = field(default_factory=list)

    def resolve(self):
        path = shutil.which(self.engine)
        if path is None:
            raise EngineMissing(
                f"OCR engine {self.engine!r} not found on PATH; install tesseract "
                "(e.g. apt-get install tesseract-ocr) or pass --ocr-engine / --text-file")
        return path

    def run(self, image_path) -> OcrResult:
        exe = self.resolve()
        env = dict(os.environ, OMP_THREAD_LIMIT=str(self.threads))
        cmd = [exe, str(image_path), "stdout", "-l", self.lang]
        start = time.perf_counter()
        try:
            proc = subprocess.run(cmd, capture_output=True, env=env, timeout=self.timeout)
        except subprocess.TimeoutExpired:
            raise Timeout(f"OCR exceeded {self.timeout}s on {image_path}") from None
        elapsed = (time.perf_counter() - start) * 1000.0
        if proc.returncode != 0:
            err = proc.stderr.decode("utf-8", "replace").strip().splitlines()
            raise OcrFailure(f"engine exited {proc.returncode} on {image_path}: {err[-1] if err else ''}")
        self.durations.append(elapsed)
        return OcrResult(str(image_path), proc.stdout.decode("utf-8", "replace"), elapsed)

    def run_many(self, image_paths):
        """OCR several pages; results come back sorted by file stem."""
        paths = sorted(image_paths, key=lambda p: (Path(p).stem, str(p)))
        if self.workers <= 1:
            return [self.run(p) for p in paths]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(self.run, paths))


def run_ocr(image_path, client: OcrClient | None = None) -> str:
    return (client or OcrClient()).run(image_path).text
