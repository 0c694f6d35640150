"""PNG figures written next to the delimited reports.

Uses the non-interactive Agg backend and strips the software tag from the
PNG metadata so that identical inputs give identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

def _save(fig, path, note=""):
    fig.tight_layout()
    # no Software tag, so the bytes depend only on the data and the note
    fig.savefig(path, dpi=100, metadata={"Software": None, "Description": note or None})
    plt.close(fig)
    return path


def roc_figure(curves, path, title="", note=""):
    """``curves``: {legend label: RocResult}."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, roc in curves.items():
        ax.plot(roc.fpr, roc.tpr, label=f"{name} ({roc.auroc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path, note)


def calibration_figure(rows, path, note=""):
    """``rows``: list of (bucket label, count) from the calibration histogram."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = [str(r[0]) for r in rows]
    ax.bar(range(len(rows)), [r[1] for r in rows], color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("samples")
    return _save(fig, path, note)


def trace_figure(metrics, path, note=""):
    """Backlog and replica count against the tick."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ticks = range(len(metrics.backlog))
    ax.plot(ticks, metrics.backlog, label="backlog", color="tab:blue")
    ax.set_xlabel("tick")
    ax.set_ylabel("backlog")
    ax2 = ax.twinx()
    ax2.step(ticks, metrics.replicas, where="post", label="replicas", color="tab:orange")
    ax2.set_ylabel("replicas")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right", fontsize=8)
    return _save(fig, path, note)


def loss_figure(history, path, note=""):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(1, len(history.epoch_loss) + 1), history.epoch_loss, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    return _save(fig, path, note)
