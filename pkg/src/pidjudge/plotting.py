"""Report figures (matplotlib, Agg backend, PNG output)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# PNG metadata would otherwise embed the matplotlib version string
_PNG_META = {"Software": None}

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
})


def _row_label(row: dict) -> str:
    return f"{row['model']}\n{row['grounding_mode']}"


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def judge_scores_figure(rows: Sequence[dict], path: Path) -> Optional[Path]:
    """Grouped precision/recall/F1 bars, one group per (model, grounding mode)."""
    rows = [r for r in rows if r.get("precision") is not None]
    if not rows:
        return None
    x = np.arange(len(rows))
    width = 0.26
    fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(rows) + 1.5), 3.2))
    for k, (key, color) in enumerate((("precision", "#4c72b0"), ("recall", "#dd8452"), ("f1", "#55a868"))):
        vals = [r[key] for r in rows]
        bars = ax.bar(x + (k - 1) * width, vals, width, label=key.capitalize() if key != "f1" else "F1", color=color)
        ax.bar_label(bars, fmt="%.3f", fontsize=7, padding=1)
    ax.set_xticks(x)
    ax.set_xticklabels([_row_label(r) for r in rows], fontsize=7)
    ax.set_ylim(0, 1.25)
    ax.set_ylabel("score")
    ax.set_title("Missing-object judge")
    ax.legend(loc="upper left", ncol=3, fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def map_correction_figure(rows: Sequence[dict], path: Path) -> Optional[Path]:
    """mAP before vs. after correction for each row."""
    rows = [r for r in rows if r.get("map_before") is not None and r.get("map_after") is not None]
    if not rows:
        return None
    x = np.arange(len(rows))
    width = 0.36
    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(rows) + 1.5), 3.2))
    b0 = ax.bar(x - width / 2, [r["map_before"] for r in rows], width, label="before correction", color="#8c8c8c")
    b1 = ax.bar(x + width / 2, [r["map_after"] for r in rows], width, label="after correction", color="#4c72b0")
    for bars in (b0, b1):
        ax.bar_label(bars, fmt="%.3f", fontsize=7, padding=1)
    ax.set_xticks(x)
    ax.set_xticklabels([_row_label(r) for r in rows], fontsize=7)
    ax.set_ylim(0, 1.25)
    ax.set_ylabel("mAP")
    ax.set_title("Detection quality")
    ax.legend(loc="upper left", ncol=2, fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def per_class_ap_figure(before: dict, after: dict, title: str, path: Path) -> Optional[Path]:
    classes = sorted(set(before) | set(after))
    if not classes:
        return None
    y = np.arange(len(classes))
    fig, ax = plt.subplots(figsize=(5.0, 0.35 * len(classes) + 1.2))
    ax.barh(y + 0.2, [before.get(c, 0.0) for c in classes], 0.4, label="before", color="#8c8c8c")
    ax.barh(y - 0.2, [after.get(c, 0.0) for c in classes], 0.4, label="after", color="#4c72b0")
    ax.set_yticks(y)
    ax.set_yticklabels(classes)
    ax.set_xlim(0, 1.0)
    ax.set_xlabel("AP")
    ax.set_title(title, fontsize=9)
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
