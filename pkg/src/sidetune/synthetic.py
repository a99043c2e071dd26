"""Tiny separable corpora for smoke tests and demos.

Each class gets its own stripe pattern in the page image and its own keyword
vocabulary in the text, so both modalities carry the label on their own.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def make_corpus(root, num_classes=2, per_class=16, image_size=(48, 40), words_per_doc=30,
                embedding_dim=300, seed=0, missing_text=0):
    """Write ``root/images/<class>/*.png``, ``root/text/<class>/*.txt`` and ``root/embeddings.txt``.

    Returns a dict of the paths. ``missing_text`` text files are skipped from
    the first class to exercise the empty-text path.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    h, w = image_size
    class_names = [f"class{k:02d}" for k in range(num_classes)]
    vocab = {name: [f"{name}_w{j}" for j in range(8)] for name in class_names}
    shared = ["the", "of", "and", "to", "Dear", "Mr.", "2004", "ta6le"]
    for k, name in enumerate(class_names):
        (root / "images" / name).mkdir(parents=True, exist_ok=True)
        (root / "text" / name).mkdir(parents=True, exist_ok=True)
        period = 2 + 2 * k
        for i in range(per_class):
            stem = f"{name}_{i:04d}"
            base = np.zeros((h, w))
            rows = (np.arange(h) // period) % 2 == 0
            base[rows] = 0.9 if k % 2 == 0 else 0.6
            page = np.clip(base + rng.normal(0, 0.03, (h, w)), 0, 1)
            Image.fromarray((page * 255).astype(np.uint8), mode="L").save(root / "images" / name / f"{stem}.png")
            if k == 0 and i < missing_text:
                continue
            words = rng.choice(vocab[name] + shared, size=words_per_doc)
            (root / "text" / name / f"{stem}.txt").write_text(" ".join(words) + "\n", encoding="utf-8")
    tokens = shared + [t for name in class_names for t in vocab[name]]
    # component scale close to real pretrained vectors
    emb = rng.normal(0, 0.1, (len(tokens), embedding_dim)).astype(np.float32)
    with open(root / "embeddings.txt", "w", encoding="utf-8") as f:
        f.write(f"{len(tokens)} {embedding_dim}\n")
        for t, v in zip(tokens, emb):
            f.write(t + " " + " ".join(f"{x:.6f}" for x in v) + "\n")
    return {"image_root": root / "images", "text_root": root / "text",
            "embeddings": root / "embeddings.txt", "class_names": class_names}
