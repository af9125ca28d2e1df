"""Headless figures and aligned text tables for run outputs.

Figures render through the Agg backend and are saved without software
metadata so identical runs produce identical bytes.  Tables are plain
monospace-aligned text; numeric formatting is the caller's job.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def aligned_table(headers, rows):
    """Left-padded columns with a two-space gutter, header underlined."""
    headers = [str(h) for h in headers]
    rows = [[str(c) for c in row] for row in rows]
    for row in rows:
        if len(row) != len(headers):
            raise ValueError("every row must match the header length")
    widths = [len(h) for h in headers]
    for row in rows:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines) + "\n"


def manifest_header(manifest):
    """Comment block for text reports; wall-clock stays out so identical
    runs produce identical files."""
    lines = [f"# probpnp {manifest['command']}"]
    for key in ("config_digest", "seed", "version"):
        lines.append(f"# {key}: {manifest[key]}")
    return "\n".join(lines) + "\n\n"


def save_figure(fig, path):
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)


def loss_curve_figure(trace, phase_boundary=None, title="training loss"):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(np.arange(len(trace)), trace, lw=1.2, color="#1f6fb2")
    if phase_boundary is not None and 0 < phase_boundary < len(trace):
        ax.axvline(phase_boundary, color="#b25a1f", ls="--", lw=1.0, label="phase switch")
        ax.legend(loc="upper right", frameon=False)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    return fig


def angle_histogram_figure(angles_deg, weights=None, bins=36, title="sample angles"):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.hist(
        angles_deg,
        bins=bins,
        range=(-180.0, 180.0),
        weights=weights,
        color="#1f6fb2",
        edgecolor="white",
    )
    ax.set_xlabel("angle [deg]")
    ax.set_ylabel("weight" if weights is not None else "count")
    ax.set_xlim(-180.0, 180.0)
    ax.set_title(title)
    fig.tight_layout()
    return fig


def recall_curves_figure(curves, title="recall vs threshold"):
    """``curves``: sequence of (label, thresholds, recalls, xlabel)."""
    fig, axes = plt.subplots(1, len(curves), figsize=(3.4 * len(curves), 3.2))
    if len(curves) == 1:
        axes = [axes]
    for ax, (label, thresholds, recalls, xlabel) in zip(axes, curves):
        ax.plot(thresholds, recalls, marker="o", ms=3, lw=1.2, color="#1f6fb2")
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("recall")
        ax.set_title(label)
        ax.grid(alpha=0.25)
    fig.suptitle(title)
    fig.tight_layout()
    return fig
