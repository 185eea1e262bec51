"""Optional report figures (``--figures``). Tables and CSV stay the primary output."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def horizon_error_figure(curves: dict[str, np.ndarray], path) -> Path:
    """Mean centroid error against forecast step, one line per predictor."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for name, err in curves.items():
        ax.plot(np.arange(1, len(err) + 1), err, label=name)
    ax.set_xlabel("forecast step (frames)")
    ax.set_ylabel("centroid error (px)")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def component_figure(rows: Sequence[dict], path) -> Path:
    """ID switches per association-stage setting, grouped by suite."""
    suites = list(dict.fromkeys(r["suite"] for r in rows))
    labels = list(dict.fromkeys(f"{r['fusion']}{r['iou']}{r['occlusion']}" for r in rows))
    width = 0.8 / max(len(labels), 1)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for k, lab in enumerate(labels):
        vals = [next((r["ids"] for r in rows if r["suite"] == s
                      and f"{r['fusion']}{r['iou']}{r['occlusion']}" == lab), 0) for s in suites]
        ax.bar(np.arange(len(suites)) + k * width, vals, width, label=lab)
    ax.set_xticks(np.arange(len(suites)) + 0.4 - width / 2)
    ax.set_xticklabels(suites, rotation=15)
    ax.set_ylabel("ID switches")
    ax.legend(title="fusion/iou/occl", frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
