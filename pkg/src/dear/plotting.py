"""Report figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def _figure(width: float = 6.0):
    fig, ax = plt.subplots(figsize=(width, width * GOLDEN))
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_attack_accuracy(rows: list[dict], path, title: str = "Bit accuracy per attack") -> Path:
    """Bar chart of mean accuracy per attack row (keys ``attack``, ``mean_acc``)."""
    fig, ax = _figure(max(6.0, 0.8 * len(rows) + 2))
    names = [r["attack"] for r in rows]
    accs = [100 * (r["mean_acc"] if r["mean_acc"] is not None else float("nan")) for r in rows]
    bars = ax.bar(range(len(rows)), accs, color="0.45")
    for bar, acc in zip(bars, accs):
        ax.text(bar.get_x() + bar.get_width() / 2, acc + 0.5, f"{acc:.1f}", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("ACC (%)")
    ax.set_ylim(0, 105)
    ax.axhline(50, color="0.7", lw=0.8, ls="--")
    ax.set_title(title, fontsize=10)
    return _save(fig, path)


def plot_strength_tradeoff(rows: list[dict], path) -> Path:
    """SNR and accuracy against strength factor (keys ``strength``, ``mean_snr_db``, ``mean_acc``)."""
    rows = sorted(rows, key=lambda r: r["strength"])
    s = [r["strength"] for r in rows]
    fig, ax = _figure()
    ax.plot(s, [r["mean_snr_db"] for r in rows], "o-", color="k", label="SNR")
    ax.set_xlabel("strength factor S")
    ax.set_ylabel("SNR (dB)")
    ax2 = ax.twinx()
    ax2.plot(s, [100 * r["mean_acc"] for r in rows], "s--", color="0.5", label="ACC")
    ax2.set_ylabel("ACC (%)")
    ax2.spines["top"].set_visible(False)
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], frameon=False, loc="center right")
    return _save(fig, path)


def plot_training_curves(steps: list[dict], evaluations: list[dict], path) -> Path:
    """Training losses per step and held-out metrics per evaluation."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 10 * GOLDEN / 2))
    for ax in (ax1, ax2):
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    x = [e["step"] for e in steps]
    for key in ("Le", "Lw"):
        ax1.semilogy(x, [max(e[key], 1e-12) for e in steps], lw=0.8, label=key)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend(frameon=False)
    if evaluations:
        ex = [e["step"] for e in evaluations]
        ax2.plot(ex, [e["snr_db"] for e in evaluations], "o-", color="k", label="SNR (dB)")
        ax2.set_xlabel("step")
        ax2.set_ylabel("SNR (dB)")
        ax3 = ax2.twinx()
        ax3.plot(ex, [100 * e["clean_acc"] for e in evaluations], "s--", color="0.4", label="clean ACC")
        ax3.plot(ex, [100 * e["dar_acc"] for e in evaluations], "^:", color="0.6", label="channel ACC")
        ax3.set_ylabel("ACC (%)")
        lines = ax2.get_lines() + ax3.get_lines()
        ax2.legend(lines, [ln.get_label() for ln in lines], frameon=False, fontsize=8)
    return _save(fig, path)
