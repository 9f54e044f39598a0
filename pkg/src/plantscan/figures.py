"""Matplotlib renderings stored next to the CSV reports.

All figures are plain files (PNG); nothing interactive. Rendering failures
must never break a pipeline stage, so callers treat these as best-effort.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(history: list[dict], path) -> None:
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(epochs, [h["loss"] for h in history], lw=1.2)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax2.plot(epochs, [h["accuracy"] for h in history], lw=1.2, color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("training accuracy")
    ax2.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_uncertainty_histogram(u_pred: np.ndarray, threshold: float, path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.hist(u_pred, bins=80, color="tab:blue", alpha=0.8)
    ax.axvline(threshold, color="tab:red", ls="--", lw=1.2,
               label=f"threshold {threshold:.3f}")
    ax.set_xlabel("predictive uncertainty (nats)")
    ax.set_ylabel("points")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_cluster_scatter(points: np.ndarray, labels: np.ndarray, path,
                         title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    noise = labels < 0
    if noise.any():
        ax.scatter(points[noise, 0], points[noise, 1], s=2, c="lightgray",
                   label="noise")
    ax.scatter(points[~noise, 0], points[~noise, 1], s=2, c=labels[~noise],
               cmap="tab10")
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_quality_histogram(distances_mm: np.ndarray, tol_mm: float, path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.hist(distances_mm, bins=80, color="tab:purple", alpha=0.8)
    ax.axvline(tol_mm, color="tab:red", ls="--", lw=1.2,
               label=f"completeness tolerance {tol_mm:g} mm")
    ax.set_xlabel("nearest-reference distance (mm)")
    ax.set_ylabel("points")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_pose_deviations(rows: list[dict], path) -> None:
    """rows: dicts with class, instance, dx_mm, dy_mm, dz_mm, droll/dpitch/dyaw."""
    if not rows:
        return
    names = [f"{r['class']}[{r['instance']}]" for r in rows]
    trans = np.array([[r["dx_mm"], r["dy_mm"], r["dz_mm"]] for r in rows])
    fig, ax = plt.subplots(figsize=(6.5, 3.4))
    x = np.arange(len(rows))
    for i, axis in enumerate("xyz"):
        ax.bar(x + (i - 1) * 0.25, np.abs(trans[:, i]), width=0.25, label=f"|d{axis}|")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("deviation (mm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
