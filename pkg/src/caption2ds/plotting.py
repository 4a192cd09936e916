"""Matplotlib rendering of comparison reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_comparison(report: dict, path, metric: str = "bleu4") -> Path:
    """Mean metric against parameter count, one line per model family,
    with the individual seeds as faint markers."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6), dpi=100)
    for side, label, style in (("2d", "2D state", "o-"), ("1d", "LSTM-1DS", "s--")):
        pts = sorted((p[f"params_{side}"], p[f"{metric}_{side}_mean"]) for p in report["pairs"])
        ax.plot([x for x, _ in pts], [y for _, y in pts], style, label=label)
        names = {p[f"model_{side}"] for p in report["pairs"]}
        seeds = [(r["params"], r[metric]) for r in report["runs"] if r["model"] in names]
        ax.scatter([x for x, _ in seeds], [y for _, y in seeds], s=10, alpha=0.35,
                   color=ax.lines[-1].get_color())
    ax.set_xlabel("parameters")
    ax.set_ylabel({"bleu4": "BLEU-4", "rouge_l": "ROUGE-L"}.get(metric, metric))
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return Path(path)
