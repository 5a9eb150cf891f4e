"""Delimited outputs and the figures rendered next to them."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 10,
}

COLORS = {"generative": "tab:blue", "discriminative": "tab:orange",
          "joint": "tab:blue", "classification": "tab:orange"}


def write_csv(path, rows: Iterable[dict], fields: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fields})
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_stylized_bounds(path, panels: Sequence[dict], n_max: float = 100.0) -> Path:
    """One panel per set of (b, v) constants, curves ``b + v / n``."""
    from .biasvar import crossing_point, stylized_bounds

    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 3.2), squeeze=False)
        for ax, c in zip(axes[0], panels):
            n = np.linspace(1, n_max, 400)
            gen, dis = stylized_bounds(n, **c)
            ax.plot(n, gen, color=COLORS["generative"], label="generative")
            ax.plot(n, dis, color=COLORS["discriminative"], label="discriminative")
            cross = crossing_point(**c)
            if cross is not None and cross <= n_max:
                ax.axvline(cross, color="0.5", ls=":", lw=1)
            top = max(gen[len(n) // 10], dis[len(n) // 10])
            ax.set_ylim(0, top)
            ax.set_xlabel("n")
            ax.set_ylabel("b + v/n")
        axes[0][0].legend()
    return _save(fig, path)


def plot_regime_curve(path, curve) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for est in ("generative", "discriminative"):
            rows = [r for r in curve.rows if r["estimator"] == est]
            n = np.array([r["n"] for r in rows])
            ax.errorbar(n, [r["mean_kl"] for r in rows], yerr=[2 * r["stderr"] for r in rows],
                        fmt="o", ms=3, color=COLORS[est], label=f"{est} (MC)")
            ax.plot(n, [r["bound"] for r in rows], color=COLORS[est], lw=1, ls="--")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("training set size n")
        ax.set_ylabel("expected KL error")
        ax.legend()
    return _save(fig, path)


def plot_robust_accuracy(path, curves: dict, norm: str) -> Path:
    """``curves`` maps a label to rows with ``epsilon`` and ``accuracy``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, rows in curves.items():
            rows = sorted(rows, key=lambda r: float(r["epsilon"]))
            ax.plot([float(r["epsilon"]) for r in rows], [100 * float(r["accuracy"]) for r in rows],
                    marker="o", ms=3, label=label, color=COLORS.get(label))
        ax.set_xlabel(f"{norm} budget (0-255 scale)")
        ax.set_ylabel("robust accuracy (%)")
        ax.set_ylim(0, 100)
        ax.legend()
    return _save(fig, path)


def plot_jacobian(path, report, image_shape: Optional[Sequence[int]] = None) -> Path:
    """Spectrum plus images of the top and bottom eigenvectors."""
    k = report.k
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(2.0 * (2 * k) + 3.5, 3.2))
        grid = fig.add_gridspec(2, 2 * k + 2)
        ax = fig.add_subplot(grid[:, :2])
        ax.plot(np.abs(report.eigenvalues), lw=1)
        ax.set_yscale("log")
        ax.set_xlabel("index")
        ax.set_ylabel("|eigenvalue|")
        vals = np.concatenate([report.top[0], report.bottom[0]])
        vecs = np.concatenate([report.top[1], report.bottom[1]], axis=1)
        for i in range(vecs.shape[1]):
            sub = fig.add_subplot(grid[i // k, 2 + 2 * (i % k): 4 + 2 * (i % k)])
            vec = vecs[:, i]
            if image_shape is not None:
                img = vec.reshape(image_shape)
                img = img[0] if img.shape[0] == 1 else np.moveaxis(img, 0, -1)
            else:
                side = int(np.sqrt(vec.size))
                img = vec[: side * side].reshape(side, side)
            if img.ndim == 3:
                img = (img - img.min()) / max(np.ptp(img), 1e-12)
                sub.imshow(img)
            else:
                lim = np.abs(img).max()
                sub.imshow(img, cmap="RdBu_r", vmin=-lim, vmax=lim)
            sub.set_title(f"{vals[i]:.3g}", fontsize=8)
            sub.axis("off")
    return _save(fig, path)


def plot_training(path, rows: Sequence[dict]) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        it = [int(r["iteration"]) for r in rows]
        for key in ("ce_loss", "dsm_loss"):
            ax.plot(it, [float(r[key]) for r in rows], label=key)
        ax.set_xlabel("iteration")
        ax.set_yscale("log")
        ax.legend()
    return _save(fig, path)


def plot_gradient_sweep(path, rows: Sequence[dict]) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot([r["sigma"] for r in rows], [r["grad_norm"] for r in rows], marker="o", ms=3)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("noise level sigma")
        ax.set_ylabel("|grad log p(c|y)|")
    return _save(fig, path)


def plot_psnr(path, rows: Sequence[dict], sigmas: Sequence[float]) -> Path:
    from .analysis import psnr_column

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for row in rows:
            ax.plot(sigmas, [row[psnr_column(s)] for s in sigmas], marker="o", ms=3,
                    label=f"{row['model']} (acc {row.get('accuracy', float('nan')):.3f})")
        ax.set_xlabel("noise level sigma")
        ax.set_ylabel("PSNR (dB)")
        ax.legend()
    return _save(fig, path)


def _as_picture(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    return img[0] if img.shape[0] == 1 else np.moveaxis(img, 0, -1)


def plot_images(path, panels: dict) -> Path:
    """Side-by-side CHW images. Titles containing 'difference' use a signed colormap."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.4 * len(panels), 2.6), squeeze=False)
        for ax, (title, img) in zip(axes[0], panels.items()):
            pic = _as_picture(img)
            if "difference" in title:
                lim = max(float(np.abs(pic).max()), 1e-12)
                ax.imshow(pic if pic.ndim == 2 else pic.mean(-1), cmap="RdBu_r", vmin=-lim, vmax=lim)
            elif pic.ndim == 2:
                ax.imshow(pic, cmap="gray", vmin=0, vmax=255)
            else:
                ax.imshow(np.clip(pic / 255.0, 0, 1))
            ax.set_title(title, fontsize=9)
            ax.axis("off")
    return _save(fig, path)
