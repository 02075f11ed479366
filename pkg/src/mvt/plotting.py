"""Figure rendering for sweep and benchmark reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 150,
    "figure.figsize": (5.0, 3.2),
}

AXIS_LABELS = {
    "block-split": "cell (local S / global T)",
    "view-count": "views L",
    "pooling-mode": "pooling",
}


def _label(r) -> str:
    if r.axis == "view-count":
        return str(r.L)
    if r.axis == "pooling-mode":
        return r.pooling
    return f"{r.S}/{r.T}"


def plot_sweep(results, path, title: str | None = None) -> None:
    """Mean accuracy with min/max whiskers per cell, forward FLOPs on a twin axis."""
    if not results:
        return
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = range(len(results))
        means = [r.mean_acc for r in results]
        lo = [r.mean_acc - r.min_acc for r in results]
        hi = [r.max_acc - r.mean_acc for r in results]
        ax.errorbar(xs, means, yerr=[lo, hi], fmt="o-", color="tab:blue", capsize=3,
                    label="val accuracy")
        ax.set_ylabel("val accuracy")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([_label(r) for r in results])
        ax.set_xlabel(AXIS_LABELS.get(results[0].axis, results[0].axis))
        best = max(range(len(results)), key=lambda i: means[i])
        ax.plot([best], [means[best]], marker="*", ms=12, color="tab:red", ls="none",
                label="best")
        ax2 = ax.twinx()
        ax2.plot(list(xs), [r.flops_fwd / 1e6 for r in results], "s--", color="tab:gray",
                 label="MFLOPs / object")
        ax2.set_ylabel("forward MFLOPs / object")
        ax2.spines["right"].set_visible(True)
        ax.legend(loc="lower left")
        ax.set_title(title or results[0].axis)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_history(history, path, title: str = "training") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = [m.epoch for m in history]
        ax.plot(ep, [m.train_acc for m in history], label="train acc")
        ax.plot(ep, [m.val_acc for m in history], label="val acc")
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1.02)
        ax2 = ax.twinx()
        ax2.plot(ep, [m.train_loss for m in history], color="tab:gray", ls=":", label="loss")
        ax2.set_ylabel("train loss")
        ax2.spines["right"].set_visible(True)
        ax.legend(loc="center right")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_bench(rows, path) -> None:
    """Stacked local/global forward FLOPs for a list of bench dicts."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [f"{r['S']}/{r['T']}" for r in rows]
        loc = [r["flops"]["local_total"] / 1e6 for r in rows]
        glo = [r["flops"]["global_total"] / 1e6 for r in rows]
        ax.bar(labels, loc, label="local blocks")
        ax.bar(labels, glo, bottom=loc, label="global blocks")
        ax.set_xlabel("local S / global T")
        ax.set_ylabel("forward MFLOPs / object")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
