"""Evaluation report: a metrics CSV plus PNG figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .synth import ChainDistance, GroundTruth, dense_samples, evaluate  # noqa: E402

METRIC_KEYS = ("recall", "precision", "mae", "rmse", "max_error", "tau", "n_points")


def write_metrics_csv(rows: list[dict], path, delimiter: str = ",") -> None:
    keys = ["name", *METRIC_KEYS]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, delimiter=delimiter, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def plot_overlay(reconstructed, truth: GroundTruth, path) -> None:
    fig = plt.figure(figsize=(6, 6))
    ax = fig.add_subplot(projection="3d")
    for k, c in enumerate(truth.polylines):
        ax.plot(c[:, 0], c[:, 1], c[:, 2], color="0.6", lw=3, label="ground truth" if k == 0 else None)
    for k, c in enumerate(reconstructed):
        c = np.asarray(c)
        ax.plot(c[:, 0], c[:, 1], c[:, 2], color="tab:red", lw=1, label="reconstructed" if k == 0 else None)
    ax.legend(loc="upper left")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_zlabel("z")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_error_histogram(reconstructed, truth: GroundTruth, tau: float, path) -> None:
    pts = dense_samples(reconstructed, tau / 10.0)
    d = ChainDistance(truth.polylines, tau / 10.0)(pts) if len(pts) else np.zeros(0)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(d / tau, bins=50, color="tab:blue")
    ax.axvline(1.0, color="k", ls="--", label="tau")
    ax.set_xlabel("distance to ground truth / tau")
    ax.set_ylabel("samples")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(reconstructed, truth: GroundTruth, out_dir, name: str = "run", delimiter: str = ",") -> dict:
    """Evaluate, then write ``metrics.csv``, ``overlay.png`` and ``errors.png`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reconstructed = [np.asarray(getattr(c, "positions", c), dtype=float).reshape(-1, 3) for c in reconstructed]
    metrics = evaluate(reconstructed, truth)
    write_metrics_csv([{"name": name, **metrics}], out / "metrics.csv", delimiter)
    plot_overlay(reconstructed, truth, out / "overlay.png")
    plot_error_histogram(reconstructed, truth, metrics["tau"], out / "errors.png")
    return metrics
