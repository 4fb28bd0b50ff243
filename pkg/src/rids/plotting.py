"""Eight-panel detection figure rendered to a file (Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .sim import IterationTrace  # noqa: E402

SENSOR_ORDER = ["S0", "S1", "S2", "S3", "S4", "S5", "S6"]


def plot_detection(traces: Sequence[IterationTrace], sensor_names: Sequence[str],
                   path: str | Path, title: str = "") -> Path:
    """Render per-sensor attack estimates, actuator estimates, both test
    statistics with thresholds and both mode timelines."""
    path = Path(path)
    t = np.array([tr.t for tr in traces])
    dets = [tr.detection for tr in traces]
    panels = len(sensor_names) + 5
    fig, axes = plt.subplots(panels, 1, figsize=(8, 1.6 * panels), sharex=True)
    for ax, name in zip(axes, sensor_names):
        vals = np.array([d.residuals[name] for d in dets])
        ax.plot(t, vals, lw=0.8)
        ax.set_ylabel(f"d_s {name}")
    ax = axes[len(sensor_names)]
    ax.plot(t, np.array([d.d_a for d in dets]), lw=0.8)
    ax.set_ylabel("d_a")

    ax = axes[len(sensor_names) + 1]
    ax.semilogy(t, np.maximum([d.sensor_stat for d in dets], 1e-6), lw=0.8)
    thr = [d.sensor_threshold for d in dets]
    ax.semilogy(t, np.where(np.isfinite(thr), thr, np.nan), "r--", lw=0.8)
    ax.set_ylabel("sensor stat")

    ax = axes[len(sensor_names) + 2]
    labels = [d.sensor_mode for d in dets]
    order = SENSOR_ORDER + sorted(set(labels) - set(SENSOR_ORDER))
    ax.step(t, [order.index(lab) for lab in labels], where="post")
    ax.set_yticks(range(len(order)))
    ax.set_yticklabels(order, fontsize=6)
    ax.set_ylabel("sensor mode")

    ax = axes[len(sensor_names) + 3]
    ax.semilogy(t, np.maximum([d.actuator_stat for d in dets], 1e-6), lw=0.8)
    ax.semilogy(t, [d.actuator_threshold for d in dets], "r--", lw=0.8)
    ax.set_ylabel("actuator stat")

    ax = axes[len(sensor_names) + 4]
    ax.step(t, [int(d.actuator_alarm) for d in dets], where="post")
    ax.set_yticks([0, 1])
    ax.set_yticklabels(["A0", "A1"])
    ax.set_ylabel("actuator mode")
    ax.set_xlabel("time (s)")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
