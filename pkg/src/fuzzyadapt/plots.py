"""Optional PNG figures; tables remain the source of truth."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def adapt_plots(report, prefix):
    epochs = [r.epoch for r in report.epochs]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(epochs, [r.mean_loss for r in report.epochs], marker="o", label="mean loss")
    if report.epochs and report.epochs[0].pseudo_label_accuracy is not None:
        ax.plot(epochs, [r.pseudo_label_accuracy for r in report.epochs], marker="s", label="pseudo-label acc")
    ax.set_xlabel("epoch")
    ax.legend()
    fig.tight_layout()
    fig.savefig(prefix + "_epochs.png", dpi=100)
    plt.close(fig)
    if report.post_metrics is not None:
        C = report.post_metrics.confusion
        rows = C.sum(axis=1, keepdims=True)
        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(100.0 * C / rows.clip(min=1), cmap="Blues", vmin=0, vmax=100)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        fig.savefig(prefix + "_confusion.png", dpi=100)
        plt.close(fig)


def bar_means(means, path, ylabel):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 3))
    names = list(means)
    ax.bar(range(len(names)), [100.0 * means[n] for n in names])
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel(ylabel + " (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
