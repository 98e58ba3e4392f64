"""ROC figure rendering (static SVG/PNG through matplotlib's Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Fixed id salt and no timestamp so identical reports render to identical bytes.
matplotlib.rcParams["svg.hashsalt"] = "cardiopulm-roc"


def plot_roc(reports, path, title: str | None = None) -> Path:
    """One step curve per report, legend with AUC and 95% CI."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.5, 5.0))
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    for r in reports:
        fpr = [p[0] for p in r.roc_points]
        tpr = [p[1] for p in r.roc_points]
        ax.plot(fpr, tpr, lw=1.4, label=f"{r.variant_name}  {r.auc:.3f} [{r.ci95[0]:.3f}, {r.ci95[1]:.3f}]")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize=7, frameon=False)
    fig.tight_layout()
    meta = {"Date": None} if path.suffix.lower() == ".svg" else {}
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path
