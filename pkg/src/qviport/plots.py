"""Vector figure rendering for solved problems.

Figures are written as SVG only: vector output keeps the artifacts
reviewable as text and diff-stable.  The matplotlib hash salt and document
date are pinned so rendering the same data twice produces identical bytes.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .regions import AMBIGUOUS, BR, NR, SR, RegionMap

__all__ = ["render_region_map", "render_terminal_ladder", "render_convergence"]

plt.rcParams["svg.hashsalt"] = "qviport"

_REGION_COLORS = {
    SR: "#d4a017",  # sell: yellow
    NR: "#2a52be",  # hold: blue
    BR: "#2e8b57",  # buy: green
    AMBIGUOUS: "#9e9e9e",
}
_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}


def _edges(nodes: np.ndarray) -> np.ndarray:
    mid = 0.5 * (nodes[1:] + nodes[:-1])
    first = nodes[0] - (mid[0] - nodes[0])
    last = nodes[-1] + (nodes[-1] - mid[-1])
    return np.concatenate([[first], mid, [last]])


def render_region_map(
    rmap: RegionMap,
    path: str,
    nu_index: int = 0,
    title: str | None = None,
    y_limit: float | None = None,
) -> str:
    """Draw the trade-region labels over the (wealth, position) plane.

    The vertical axis is the position y = v / sqrt(tau).  Boundary rows
    (label EDGE) are left blank.  Returns the path written.
    """
    labels = rmap.labels[:, :, nu_index]
    sq = math.sqrt(rmap.tau)
    y_nodes = rmap.v_nodes / sq

    rgba = np.ones(labels.shape + (4,))
    rgba[..., 3] = 0.0
    for code, color in _REGION_COLORS.items():
        mask = labels == code
        if mask.any():
            rgba[mask] = matplotlib.colors.to_rgba(color)

    fig, ax = plt.subplots(figsize=(5.2, 4.2))
    ax.pcolormesh(
        _edges(rmap.z_nodes),
        _edges(y_nodes),
        np.swapaxes(rgba, 0, 1),
        shading="flat",
        rasterized=False,
    )
    curves = rmap.boundary_curves if not rmap.is_3d else rmap.boundary_curves.get(nu_index, {})
    for name, style in (("buy_upper", "-"), ("sell_lower", "--"), ("sell_upper", ":")):
        curve = curves.get(name)
        if curve is not None and np.isfinite(curve).any():
            ax.plot(rmap.z_nodes, curve, "k" + style, linewidth=1.0, label=name.replace("_", " "))
    ax.set_xlabel("wealth z")
    ax.set_ylabel("position y")
    if y_limit is not None:
        ax.set_ylim(-y_limit if y_nodes[0] < 0 else 0.0, y_limit)
    if title:
        ax.set_title(title)
    handles, names = ax.get_legend_handles_labels()
    if handles:
        ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def render_terminal_ladder(
    rows: list[dict],
    path: str,
    title: str | None = None,
) -> str:
    """Plot W minus the near-maturity expansion against wealth, one line per
    time level.  ``rows`` hold keys tau, z, difference."""
    fig, ax = plt.subplots(figsize=(5.2, 4.0))
    taus = sorted({r["tau"] for r in rows}, reverse=True)
    for tau in taus:
        zs = [r["z"] for r in rows if r["tau"] == tau]
        ds = [r["difference"] for r in rows if r["tau"] == tau]
        ax.plot(zs, ds, label=f"T-t={tau:g}")
    ax.axhline(0.0, color="k", linewidth=0.6)
    ax.set_xlabel("wealth z")
    ax.set_ylabel("value minus expansion")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def render_convergence(study_rows, path: str, title: str | None = None) -> str:
    """Log-log plot of successive differences along a refinement ladder."""
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    xs = [r.parameter for r in study_rows if r.diff is not None]
    ys = [r.diff for r in study_rows if r.diff is not None]
    if xs:
        ax.loglog(xs, np.maximum(ys, 1e-18), "o-")
    ax.set_xlabel("ladder parameter")
    ax.set_ylabel("successive difference")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path
