"""PNG figures rendered next to the .dat files they visualize."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "svg.hashsalt": "deepbsde-uq",
}


def _save(fig, path) -> Path:
    path = Path(path).with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(path, steps, losses, title: str = "training loss"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.semilogy(steps, losses, lw=0.8)
        ax.set_xlabel("optimization step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        return _save(fig, path)


def rmse_curves(path, K, series: dict, ylabel: str = "RMSE"):
    """One log-log line per sweep value against the step budget."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, values in series.items():
            ax.loglog(K, values, marker="o", ms=3, label=label)
        ax.set_xlabel("optimization steps")
        ax.set_ylabel(ylabel)
        ax.legend()
        return _save(fig, path)


def log_scatter(path, x, series: dict, xlabel: str, ylabel: str = "log10 value"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, y in series.items():
            ax.scatter(x, y, s=6, alpha=0.7, label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend()
        return _save(fig, path)


def q_equivalence(path, qs, rhos, uq_mean: float, uq_std: float, q_star: float | None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(qs, rhos, marker="o", ms=3, label="ensemble STD")
        ax.axhline(uq_mean, color="C1", label="UQ model (mean)")
        ax.axhspan(uq_mean - uq_std, uq_mean + uq_std, color="C1", alpha=0.2)
        if q_star is not None:
            ax.plot([q_star], [uq_mean], "ko")
        ax.set_xlabel("runs Q")
        ax.set_ylabel("log-domain correlation with relative RMSE")
        ax.legend()
        return _save(fig, path)


def band(path, x, mean, std, xlabel: str, ylabel: str):
    mean, std = np.asarray(mean), np.asarray(std)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(x, mean, marker="o", ms=3)
        ax.fill_between(x, mean - std, mean + std, alpha=0.25)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        return _save(fig, path)


def histogram(path, fit, xlabel: str = "value"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        widths = np.diff(fit.edges)
        ax.bar(fit.edges[:-1], fit.density, width=widths, align="edge", alpha=0.6, edgecolor="k", lw=0.3)
        xs = np.linspace(fit.edges[0], fit.edges[-1], 200)
        ax.plot(xs, fit.pdf(xs), "r-", lw=1.2)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("density")
        ax.set_title(f"mu={fit.mu:.4f}, sigma={fit.sigma:.4f}")
        return _save(fig, path)
