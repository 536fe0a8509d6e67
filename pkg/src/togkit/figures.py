"""Figures rendered next to delimited outputs: training curves, WER summaries."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .scoring import UtteranceScore, WerReport
from .training import EpochMetrics


def plot_training_curves(metrics: list[EpochMetrics], path: str,
                         ylabel: str = "mean train nll") -> None:
    """Loss and learning-rate curves over epochs, one panel each."""
    epochs = [m.epoch for m in metrics]
    fig, (ax_loss, ax_lr) = plt.subplots(1, 2, figsize=(9.0, 3.4))
    ax_loss.plot(epochs, [m.mean_train_nll for m in metrics],
                 marker="o", markersize=3, color="tab:blue")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel(ylabel)
    ax_loss.grid(True, alpha=0.3)
    ax_lr.plot(epochs, [m.learning_rate for m in metrics],
               marker="o", markersize=3, color="tab:orange")
    ax_lr.set_xlabel("epoch")
    ax_lr.set_ylabel("learning rate")
    ax_lr.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_wer_summary(pooled: WerReport, scores: list[UtteranceScore],
                     path: str) -> None:
    """Per-utterance WER distribution with the pooled rate marked."""
    rates = [100.0 * s.report.wer for s in scores]
    fig, (ax_hist, ax_counts) = plt.subplots(1, 2, figsize=(9.0, 3.4))
    ax_hist.hist(rates, bins=min(20, max(5, len(rates) // 4)),
                 color="tab:blue", alpha=0.8)
    ax_hist.axvline(100.0 * pooled.wer, color="tab:red", linestyle="--",
                    label=f"corpus {100.0 * pooled.wer:.2f}%")
    ax_hist.set_xlabel("utterance WER (%)")
    ax_hist.set_ylabel("utterances")
    ax_hist.legend()
    ax_hist.grid(True, alpha=0.3)
    kinds = ("substitutions", "deletions", "insertions")
    counts = [pooled.substitutions, pooled.deletions, pooled.insertions]
    ax_counts.bar(kinds, counts, color=("tab:blue", "tab:orange", "tab:green"))
    ax_counts.set_ylabel("edit operations")
    ax_counts.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
