"""Figure rendering for run outputs.

Each helper draws one PNG next to the delimited file it illustrates. All of
them take already-aggregated rows, so they stay decoupled from how a run
produced its numbers.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_training_curves(histories: Mapping[str, Sequence[dict]], path) -> None:
    """Loss and supervised-ratio curves, one line per objective."""
    fig, (ax_loss, ax_ratio) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for name, rows in histories.items():
        steps = [r["step"] for r in rows]
        ax_loss.plot(steps, [r["loss"] for r in rows], label=name, linewidth=1.2)
        ax_ratio.plot(steps, [r["supervised_ratio"] for r in rows], linewidth=1.2)
    ax_loss.set_ylabel("cross entropy")
    ax_loss.legend(frameon=False)
    ax_ratio.set_ylabel("supervised ratio")
    ax_ratio.set_xlabel("step")
    ax_ratio.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_chart(rows: Sequence[dict], path) -> None:
    """Quality and cost per decode variant."""
    names = [r["variant"] for r in rows]
    xs = range(len(names))
    fig, (ax_q, ax_c) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_q.bar(xs, [r["acc_analog"] for r in rows], color="tab:blue")
    ax_q.set_xticks(list(xs), names, rotation=20)
    ax_q.set_ylabel("acc analog")
    ax_q.set_ylim(0.0, 1.05)
    ax_c.bar(xs, [r["forward_calls"] for r in rows], color="tab:orange")
    ax_c.set_xticks(list(xs), names, rotation=20)
    ax_c.set_ylabel("forward calls per sample")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_chart(rows: Sequence[dict], path) -> None:
    """Threshold sweep: quality against commit width."""
    taus = [r["tau"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.plot(taus, [r["acc_analog"] for r in rows], "o-", color="tab:blue")
    ax.set_xlabel("confidence threshold")
    ax.set_ylabel("acc analog", color="tab:blue")
    ax.set_ylim(0.0, 1.05)
    twin = ax.twinx()
    twin.plot(taus, [r["tokens_per_forward"] for r in rows], "s--", color="tab:orange")
    twin.set_ylabel("tokens per forward", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_commit_histogram(commit_lens: Sequence[int], path, block_size: int | None = None) -> None:
    """Distribution of per-round commit lengths across a run."""
    top = block_size if block_size is not None else (max(commit_lens) if commit_lens else 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist(commit_lens, bins=[k + 0.5 for k in range(top + 1)], color="tab:green",
            edgecolor="black", linewidth=0.5)
    ax.set_xlabel("tokens committed per round")
    ax.set_ylabel("rounds")
    ax.set_xlim(0.5, top + 0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
