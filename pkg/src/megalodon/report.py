"""Figures written next to the CSV outputs of ``train`` and ``eval``."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_training_curve(records: Sequence, entropy: float | None, path) -> None:
    """Train NLL against tokens seen, with the unigram-entropy reference line."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r.tokens for r in records], [r.nll for r in records], lw=1.2, label="train NLL")
    if entropy is not None:
        ax.axhline(entropy, color="gray", ls="--", lw=1, label=f"unigram entropy ({entropy:.3f})")
    ax.set_xlabel("tokens seen")
    ax.set_ylabel("NLL (nats/byte)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ppl_by_context(rows: Sequence, path) -> None:
    """Perplexity per context length on a log-x axis."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([r.context for r in rows], [r.ppl for r in rows], marker="o")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("context length (bytes)")
    ax.set_ylabel("perplexity")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
