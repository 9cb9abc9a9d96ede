"""Matplotlib figures written by the CLI report paths (Agg backend, file output only)."""

from __future__ import annotations

import math

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_loss_curve(trace, path) -> None:
    steps = [r.step for r in trace]
    totals = np.array([r.total for r in trace])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, totals, lw=0.5, alpha=0.4, label="per step")
    if len(totals) >= 20:
        k = max(5, len(totals) // 100)
        kernel = np.ones(k) / k
        smooth = np.convolve(totals, kernel, mode="valid")
        ax.plot(steps[k - 1:], smooth, lw=1.5, label=f"moving avg ({k})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_view_histogram(manifest, path) -> None:
    from .dataset import N_AZIMUTH_BINS

    bins = [r.bin for r in manifest.records]
    counts = np.bincount(bins, minlength=N_AZIMUTH_BINS)
    centers = -180.0 + (np.arange(N_AZIMUTH_BINS) + 0.5) * 360.0 / N_AZIMUTH_BINS
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(centers, counts, width=360.0 / N_AZIMUTH_BINS * 0.9)
    ax.set_xlabel("yaw (deg, 0 = front)")
    ax.set_ylabel("images")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_coverage_heatmap(path, grid_res: int = 256) -> None:
    from . import geometry
    from .geometry import FRAME_A, FRAME_B

    theta = np.linspace(0, math.pi, grid_res)
    phi = np.linspace(-math.pi, math.pi, grid_res)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    dirs = geometry.sph_to_cart(np.stack([np.ones_like(tt), tt, pp], -1).reshape(-1, 3))
    total = np.zeros(dirs.shape[0])
    for frame in (FRAME_A, FRAME_B):
        s = geometry.frame_coords(frame, dirs)
        total += geometry.fusion_weight(s[..., 1], s[..., 2])
    fig, ax = plt.subplots(figsize=(6, 3.2))
    im = ax.imshow(total.reshape(grid_res, grid_res), origin="lower",
                   extent=[-180, 180, 0, 180], aspect="auto", cmap="viridis")
    fig.colorbar(im, ax=ax, label="w_A + w_B")
    ax.set_xlabel("phi (deg)")
    ax.set_ylabel("theta (deg)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_seam_bars(values: dict[str, float], path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    names = list(values.keys())
    ax.bar(names, [values[n] for n in names])
    ax.axhline(1.0, color="k", lw=0.8, ls="--")
    ax.set_ylabel("seam jump / interior median")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_auc_plot(rows: list[dict], path) -> None:
    seeds = sorted({r["seed"] for r in rows})
    with_v = [next(r["mismatch_auc"] for r in rows if r["seed"] == s and r["vico"]) for s in seeds]
    without = [next(r["mismatch_auc"] for r in rows if r["seed"] == s and not r["vico"]) for s in seeds]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    x = np.arange(len(seeds))
    ax.plot(x, without, "o-", label="without consistency term")
    ax.plot(x, with_v, "s-", label="with consistency term")
    ax.set_xticks(x, [str(s) for s in seeds])
    ax.set_xlabel("seed")
    ax.set_ylabel("mismatch AUC")
    ax.set_ylim(0.0, 1.05)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_contact_sheet(images: list[np.ndarray], path, cols: int = 4) -> None:
    n = len(images)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < n:
            ax.imshow(images[i])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
