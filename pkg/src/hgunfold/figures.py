"""Matplotlib rendering of run reports, written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def render_history(history, path: str | Path) -> None:
    """Loss/energy and accuracy curves over training epochs."""
    epochs = [r.epoch for r in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_loss.plot(epochs, [r.loss for r in history], label="train loss", color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss", color="tab:red")
    ax_energy = ax_loss.twinx()
    ax_energy.plot(
        epochs, [r.energy for r in history], label="energy", color="tab:blue", alpha=0.7
    )
    ax_energy.set_ylabel("embedding energy", color="tab:blue")
    ax_acc.plot(epochs, [r.train_acc for r in history], label="train")
    val = [r.val_acc for r in history]
    if any(v == v for v in val):  # skip an all-NaN validation column
        ax_acc.plot(epochs, val, label="val")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.02)
    ax_acc.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_trace(rows: list[dict], path: str | Path) -> None:
    """Energy and accuracy as functions of the number of propagation steps."""
    steps = [r["step"] for r in rows]
    fig, (ax_e, ax_a) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_e.plot(steps, [r["energy"] for r in rows], marker="o", ms=3, color="tab:blue")
    ax_e.set_xlabel("propagation steps")
    ax_e.set_ylabel("energy")
    ax_a.plot(steps, [r["train_acc"] for r in rows], marker="o", ms=3, label="train")
    val = [r["val_acc"] for r in rows]
    if any(v == v for v in val):
        ax_a.plot(steps, val, marker="s", ms=3, label="val")
    ax_a.set_xlabel("propagation steps")
    ax_a.set_ylabel("accuracy")
    ax_a.set_ylim(0.0, 1.02)
    ax_a.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
