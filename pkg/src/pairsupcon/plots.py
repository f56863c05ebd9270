"""Figure rendering for the command-line report paths.

Every figure-writing command saves a PNG next to its delimited output
(CSV trace, JSON report).  The Agg backend keeps rendering headless and
byte-deterministic for identical inputs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_trace_plot(trace, path) -> None:
    """Loss curves (total / classification / instance) against the step index."""
    steps = [row.step for row in trace]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [row.total for row in trace], label="total", lw=1.5)
    ax.plot(steps, [row.classification for row in trace],
            label="classification", lw=1.0, alpha=0.8)
    ax.plot(steps, [row.instance for row in trace],
            label="instance discrimination", lw=1.0, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_report_plot(report, path) -> None:
    """Per-run metric values as bars with the mean as a horizontal line."""
    values = np.asarray(report.values)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(np.arange(values.size), values, color="#4878cf", width=0.7)
    ax.axhline(report.mean, color="#d65f5f", lw=1.5,
               label=f"mean = {report.mean:.4f} (std {report.std:.4f})")
    ax.set_xlabel("run")
    ax.set_ylabel(report.metric)
    ax.set_xticks(np.arange(values.size))
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
