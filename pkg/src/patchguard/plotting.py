"""Figures written next to the CSV reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "patchguard",
}


def _save(fig, path) -> None:
    # fixed metadata keeps repeated runs byte-stable
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def histogram_figure(hist: Sequence[Sequence[float]], path) -> None:
    """Clean true-class versus attacked-class local logits, as produced by the diagnose command."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        lo = np.array([h[0] for h in hist])
        hi = np.array([h[1] for h in hist])
        width = hi - lo
        ax.bar(lo, [h[2] for h in hist], width=width, align="edge", alpha=0.6, label="true class, clean")
        ax.bar(lo, [h[3] for h in hist], width=width, align="edge", alpha=0.6, label="attacked class, patched")
        ax.set_xlabel("local logit")
        ax.set_ylabel("cells")
        ax.set_yscale("symlog")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def margin_figure(true_lower: Sequence[float], wrong_upper: Sequence[float], certified: Sequence[bool], path) -> None:
    """Worst-case true-class lower bound against the largest wrong-class upper bound per image."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        tl = np.asarray(true_lower, dtype=float)
        wu = np.asarray(wrong_upper, dtype=float)
        c = np.asarray(certified, dtype=bool)
        ax.scatter(wu[~c], tl[~c], s=8, marker="x", label="not certified")
        ax.scatter(wu[c], tl[c], s=8, label="certified")
        top = max(float(np.max(tl, initial=1.0)), float(np.max(wu, initial=1.0)))
        ax.plot([0, top], [0, top], lw=0.8, color="0.4")
        ax.set_xlabel("wrong-class upper bound")
        ax.set_ylabel("true-class lower bound")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def sweep_figure(rows: List[Dict[str, object]], path) -> None:
    """One panel per swept parameter, clean and provable robust accuracy."""
    params = list(dict.fromkeys(str(r["parameter"]) for r in rows))
    if not params:
        return
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(params), figsize=(2.8 * len(params), 2.8), squeeze=False)
        for ax, name in zip(axes[0], params):
            sel = [r for r in rows if r["parameter"] == name]
            labels = [str(r["value"]) for r in sel]
            x = np.arange(len(sel))
            ax.plot(x, [float(r["clean_accuracy"]) for r in sel], marker="o", label="clean")
            ax.plot(x, [float(r["provable_accuracy"]) for r in sel], marker="s", label="provable")
            ax.set_xticks(x)
            ax.set_xticklabels(labels)
            ax.set_xlabel(name)
            ax.set_ylim(-0.02, 1.02)
        axes[0][0].set_ylabel("accuracy")
        axes[0][0].legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)
