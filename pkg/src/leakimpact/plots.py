"""Report figures. PNGs carry no timestamp or version metadata so reruns are
byte-identical."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_lis(rows, path, threshold=None):
    """Bar per leak with its bootstrap interval."""
    labels = [r["leak"] for r in rows]
    lis = np.array([r["lis"] for r in rows])
    lo = lis - np.array([r["ci_low"] for r in rows])
    hi = np.array([r["ci_high"] for r in rows]) - lis
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows) + 2), 3.5))
    x = np.arange(len(rows))
    ax.bar(x, lis, color=["tab:red" if r["significant"] else "tab:gray" for r in rows])
    ax.errorbar(x, lis, yerr=[lo, hi], fmt="none", ecolor="black", capsize=3)
    if threshold is not None:
        ax.axhline(threshold, color="tab:blue", ls="--", lw=1, label=f"threshold {threshold:g}")
        ax.legend(loc="best", fontsize=8)
    ax.axhline(0, color="black", lw=0.5)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("LIS (AUC delta)")
    _save(fig, path)


def plot_recall(history, path, best_epoch=None):
    k = history[0]["k"]
    r = [h["mean_recall_at_k"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(len(r)), r, marker="o", ms=3)
    if best_epoch is not None:
        ax.axvline(best_epoch, color="tab:red", ls="--", lw=1, label=f"best epoch {best_epoch}")
        ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"validation recall@{k}")
    ax.set_ylim(0, 1.02)
    _save(fig, path)


def plot_downstream(report, path):
    names = ["baseline", "encoder", "raw leaked"]
    auc = [report["auc_base"], report["auc_encoder"], report["auc_raw"]]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar(names, auc, color=["tab:gray", "tab:green", "tab:orange"])
    lo = min(auc) - 0.02
    ax.set_ylim(max(0.0, lo), min(1.0, max(auc) + 0.02))
    ax.set_ylabel("eval AUC (period B)")
    _save(fig, path)
