"""Delimited tables, JSON records and the matplotlib figures that go with them."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_META = {"Software": None}


def write_delimited(path, header, rows, delimiter="\t"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def read_delimited(path, delimiter="\t"):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f, delimiter=delimiter))
    return rows[0], rows[1:]


def write_jsonl(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _exact(x):
    # repr round-trips a float exactly
    return repr(float(x))


def eval_rows(report, label="model"):
    """One row: label, OA, then per-class accuracy in class order ('-' if absent)."""
    header = ["model", "OA"] + list(report.class_names)
    row = [label, _exact(report.overall_accuracy)]
    row += [_exact(report.per_class_accuracy[c]) if c in report.per_class_accuracy else "-"
            for c in report.class_names]
    return header, [row]


def format_eval_text(report, label="model"):
    header, rows = eval_rows(report, label)
    cells = [header] + [[rows[0][0]] + [c if c == "-" else f"{100 * float(c):.1f}%" for c in rows[0][1:]]]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.append(f"samples: {report.num_samples}")
    return "\n".join(lines) + "\n"


def write_eval_report(report, out_dir, stem="eval", label="model", figures=True):
    out_dir = Path(out_dir)
    header, rows = eval_rows(report, label)
    paths = {
        "tsv": write_delimited(out_dir / f"{stem}.tsv", header, rows),
        "json": write_json(out_dir / f"{stem}.json", report.to_dict()),
    }
    txt = out_dir / f"{stem}.txt"
    txt.write_text(format_eval_text(report, label), encoding="utf-8")
    paths["txt"] = txt
    if figures:
        paths["confusion"] = plot_confusion(report, out_dir / f"{stem}_confusion.png")
        paths["per_class"] = plot_per_class(report, out_dir / f"{stem}_per_class.png")
    return paths


def history_rows(history):
    keys = ["epoch", "lr_end", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "seconds"]
    rows = [[_exact(r[k]) if k in r and k != "epoch" else str(r.get(k, "-")) for k in keys]
            for r in history.epochs]
    return keys, rows


def write_history(history, out_dir, figures=True):
    out_dir = Path(out_dir)
    header, rows = history_rows(history)
    paths = {"tsv": write_delimited(out_dir / "history.tsv", header, rows),
             "jsonl": write_jsonl(out_dir / "history.jsonl", history.epochs)}
    if figures:
        paths["png"] = plot_history(history, out_dir / "history.png")
    return paths


def sweep_rows(rows):
    header = ["backbone", "variant", "alpha", "alpha_0", "alpha_1", "alpha_2", "OA"]
    out = []
    for r in rows:
        a = list(r.alpha.alphas) + [None] * (3 - len(r.alpha.alphas))
        out.append([r.backbone, r.variant, r.alpha.label()] +
                   ["-" if x is None else _exact(x) for x in a[:3]] +
                   [_exact(r.report.overall_accuracy)])
    return header, out


def write_sweep(rows, out_dir, figures=True):
    out_dir = Path(out_dir)
    header, table = sweep_rows(rows)
    paths = {"tsv": write_delimited(out_dir / "sweep.tsv", header, table),
             "jsonl": write_jsonl(out_dir / "sweep.jsonl", [
                 {"backbone": r.backbone, "variant": r.variant, "alphas": list(r.alpha.alphas),
                  "report": r.report.to_dict()} for r in rows])}
    if figures:
        for backbone in dict.fromkeys(r.backbone for r in rows):
            paths[f"png:{backbone}"] = plot_sweep(
                [r for r in rows if r.backbone == backbone], out_dir / f"sweep_{backbone}.png", backbone)
    return paths


def timing_rows(breakdown):
    d = breakdown.to_dict()
    header = list(d)
    return header, [[_exact(d[k]) if k != "runs" else str(d[k]) for k in header]]


def write_timing(breakdown, out_dir, stem="profile", figures=True):
    out_dir = Path(out_dir)
    header, rows = timing_rows(breakdown)
    paths = {"tsv": write_delimited(out_dir / f"{stem}.tsv", header, rows),
             "json": write_json(out_dir / f"{stem}.json", breakdown.to_dict())}
    if figures:
        paths["png"] = plot_timing(breakdown, out_dir / f"{stem}.png")
    return paths


# figures

def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=PNG_META)
    plt.close(fig)
    return path


def plot_history(history, path):
    epochs = [r["epoch"] for r in history.epochs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [r["train_loss"] for r in history.epochs], label="train")
    if any("val_loss" in r for r in history.epochs):
        ax1.plot(epochs, [r.get("val_loss", np.nan) for r in history.epochs], label="val")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("cross-entropy")
    ax1.legend()
    ax2.plot(epochs, [r["train_accuracy"] for r in history.epochs], label="train")
    if any("val_accuracy" in r for r in history.epochs):
        ax2.plot(epochs, [r.get("val_accuracy", np.nan) for r in history.epochs], label="val")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1.02)
    ax2.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(rows, path, title=""):
    """Accuracy against alpha configuration, one line per head variant."""
    fig, ax = plt.subplots(figsize=(8, 4))
    labels = list(dict.fromkeys(r.alpha.label() for r in rows))
    x = {lab: i for i, lab in enumerate(labels)}
    for variant in dict.fromkeys(r.variant for r in rows):
        sel = [r for r in rows if r.variant == variant]
        ax.plot([x[r.alpha.label()] for r in sel], [100 * r.report.overall_accuracy for r in sel],
                marker="o", label=variant)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_xlabel(r"$\alpha_0/\alpha_1/\alpha_2$")
    ax.set_ylabel("overall accuracy (%)")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_confusion(report, path):
    cm = report.confusion.astype(float)
    support = cm.sum(axis=1, keepdims=True)
    norm = np.divide(cm, support, out=np.zeros_like(cm), where=support > 0)
    n = len(report.class_names)
    fig, ax = plt.subplots(figsize=(1.0 + 0.55 * n, 0.8 + 0.5 * n))
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels(report.class_names, rotation=45, ha="right", fontsize=8)
    ax.set_yticklabels(report.class_names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(n):
        for j in range(n):
            if report.confusion[i, j]:
                ax.text(j, i, str(report.confusion[i, j]), ha="center", va="center", fontsize=7,
                        color="white" if norm[i, j] > 0.5 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_per_class(report, path):
    names = list(report.class_names)
    vals = [100 * report.per_class_accuracy.get(c, np.nan) for c in names]
    fig, ax = plt.subplots(figsize=(1.5 + 0.5 * len(names), 3.5))
    ax.bar(range(len(names)), vals, color="tab:blue")
    ax.axhline(100 * report.overall_accuracy, color="tab:red", ls="--", lw=1, label="OA")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_timing(breakdown, path):
    stages = [s for s in breakdown.STAGES]
    vals = [getattr(breakdown, s) for s in stages]
    fig, ax = plt.subplots(figsize=(7, 2.2))
    left = 0.0
    for s, v in zip(stages, vals):
        ax.barh([0], [v], left=left, label=s.removesuffix("_ms"))
        left += v
    ax.set_yticks([])
    ax.set_xlabel(f"ms (mean of {breakdown.runs} runs, total {breakdown.total_ms:.1f} ms)")
    ax.legend(ncol=3, fontsize=7, loc="upper center", bbox_to_anchor=(0.5, -0.45))
    fig.tight_layout()
    return _save(fig, path)
