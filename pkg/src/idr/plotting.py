"""Training curves and camera-error figures (matplotlib, headless)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _column(rows: list[dict], key: str) -> np.ndarray:
    return np.array([float(r[key]) for r in rows], dtype=np.float64)


def plot_training_curves(rows: list[dict], out_dir: str | Path) -> list[Path]:
    """Write loss.png, psnr.png and, when camera errors were logged, camera_error_curve.png."""
    out = Path(out_dir)
    written = []
    if not rows:
        return written
    epoch = _column(rows, "epoch")

    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("loss", "rgb", "mask", "eikonal"):
        y = _column(rows, key)
        ax.semilogy(epoch, np.maximum(y, 1e-12), label=key, lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("value")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "loss.png", dpi=100)
    plt.close(fig)
    written.append(out / "loss.png")

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epoch, _column(rows, "psnr"), lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("batch PSNR [dB]")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "psnr.png", dpi=100)
    plt.close(fig)
    written.append(out / "psnr.png")

    rot = _column(rows, "rot_err_deg")
    if np.any(np.isfinite(rot)):
        fig, ax1 = plt.subplots(figsize=(6, 4))
        ax1.plot(epoch, rot, color="tab:blue", lw=1)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("mean rotation error [deg]", color="tab:blue")
        ax2 = ax1.twinx()
        ax2.plot(epoch, _column(rows, "trans_err"), color="tab:red", lw=1)
        ax2.set_ylabel("mean translation error", color="tab:red")
        fig.tight_layout()
        fig.savefig(out / "camera_error_curve.png", dpi=100)
        plt.close(fig)
        written.append(out / "camera_error_curve.png")
    return written


def plot_camera_errors(rot_deg: np.ndarray, trans: np.ndarray, path: str | Path,
                       initial: tuple[np.ndarray, np.ndarray] | None = None) -> Path:
    """Per-camera rotation and translation errors, optionally next to their starting values."""
    path = Path(path)
    idx = np.arange(len(rot_deg))
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for ax, vals, start, label in ((axes[0], rot_deg, None if initial is None else initial[0], "rotation [deg]"),
                                   (axes[1], trans, None if initial is None else initial[1], "translation")):
        if start is not None:
            ax.bar(idx - 0.2, start, width=0.4, color="0.7", label="initial")
            ax.bar(idx + 0.2, vals, width=0.4, color="tab:blue", label="final")
            ax.legend()
        else:
            ax.bar(idx, vals, color="tab:blue")
        ax.set_xlabel("camera")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
