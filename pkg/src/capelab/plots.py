"""Deterministic SVG figure rendering for sweep and comparison reports.

Figures are drawn straight onto matplotlib Figure objects (no pyplot global
state) and saved with a fixed svg.hashsalt and no Date metadata, so identical
inputs produce byte-identical SVG files.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib as mpl
from matplotlib.figure import Figure

SVG_HASHSALT = "capelab"

# One panel per metric, mirroring the mixing-coefficient trade-off figures.
PANEL_METRICS = ("D_arc", "D_sum", "E-P_src", "E-R_ref", "R1", "len")

Curve = tuple[Sequence[float], Mapping[str, Sequence[float | None]]]


def render_alpha_panels(
    path,
    curves: Mapping[str, Curve],
    hlines: Mapping[str, Mapping[str, float | None]] | None = None,
    title: str | None = None,
) -> None:
    """Render metric-versus-alpha line charts, one panel per metric.

    curves maps a series label to (alphas, {metric: values}); hlines maps a
    label to {metric: constant} drawn as a dashed horizontal reference (used
    for baselines that have no mixing coefficient).
    """
    fig = Figure(figsize=(12, 6.5))
    axes = fig.subplots(2, 3).ravel()
    for ax, metric in zip(axes, PANEL_METRICS):
        for label, (alphas, table) in curves.items():
            values = table.get(metric)
            if values is None:
                continue
            xs = [a for a, v in zip(alphas, values) if v is not None]
            ys = [v for v in values if v is not None]
            if xs:
                ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.2, label=label)
        for label, table in (hlines or {}).items():
            value = table.get(metric)
            if value is not None:
                ax.axhline(value, linestyle="--", linewidth=1.0, color="gray", label=label)
        ax.set_title(metric, fontsize=10)
        ax.set_xlabel("alpha", fontsize=9)
        ax.tick_params(labelsize=8)
        ax.grid(True, linewidth=0.3, alpha=0.5)
    handles, labels = axes[0].get_legend_handles_labels()
    if handles:
        fig.legend(handles, labels, loc="lower center", ncol=min(len(labels), 6), fontsize=9)
    if title:
        fig.suptitle(title, fontsize=11)
    fig.tight_layout(rect=(0, 0.06, 1, 0.97))
    with mpl.rc_context({"svg.hashsalt": SVG_HASHSALT}):
        fig.savefig(path, format="svg", metadata={"Date": None})
