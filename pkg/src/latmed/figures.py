"""Render study figures next to the delimited output.

Two canned layouts mirror the study designs: rejection-rate curves over
sample size (panels by confounding level, line styles by effect
modification) for robustness grids, and power curves (panels by effect
size and reliability, line styles by interaction strength) for power
grids.  Bias histograms overlay both methods per condition.  Everything
renders through the Agg backend to PNG so repeated runs produce
identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import CellResult, histogram_bins
from .pipeline import METHODS

METHOD_COLORS = {"g-estimation": "#1f77b4", "corrected-regression": "#d62728"}
LINE_STYLES = ("-", "--", "-.", ":")
MAX_HIST_PANELS = 12


def _unique(values):
    return sorted(set(values))


def render_rate_curves(results: list[CellResult], path: Path) -> Path | None:
    """Rejection rate versus N; panel and style keys picked from the grid."""
    rows = [s for r in results for s in r.summaries]
    if not rows:
        return None
    power_style = any(s.condition.theta_m != 0 for s in rows)
    if power_style:
        panel_key = lambda s: (s.condition.theta_m, s.condition.kappa)
        panel_label = lambda k: f"effect {k[0]:g}, reliability {k[1]:g}"
        style_key = lambda s: s.condition.gamma_xr
        style_label = lambda v: f"interaction {v:g}"
        ylabel = "power"
    else:
        panel_key = lambda s: s.condition.delta_u
        panel_label = lambda k: f"confounding {k:g}"
        style_key = lambda s: s.condition.delta_ur
        style_label = lambda v: f"modification {v:g}"
        ylabel = "rejection rate"

    panels = _unique(panel_key(s) for s in rows)
    styles = _unique(style_key(s) for s in rows)
    n_panels = len(panels)
    n_cols = min(4, n_panels)
    n_rows = (n_panels + n_cols - 1) // n_cols
    fig, axes = plt.subplots(
        n_rows, n_cols, figsize=(3.2 * n_cols, 2.8 * n_rows), squeeze=False, sharey=True
    )
    for ax in axes.ravel()[n_panels:]:
        ax.set_visible(False)
    for i, panel in enumerate(panels):
        ax = axes.ravel()[i]
        for method in METHODS:
            for j, style in enumerate(styles):
                pts = sorted(
                    (s.condition.n_obs, s.rejection_rate)
                    for s in rows
                    if s.method == method
                    and panel_key(s) == panel
                    and style_key(s) == style
                )
                if not pts:
                    continue
                ns, rates = zip(*pts)
                ax.plot(
                    ns, rates,
                    color=METHOD_COLORS[method],
                    linestyle=LINE_STYLES[j % len(LINE_STYLES)],
                    marker="o", markersize=3,
                    label=f"{method}, {style_label(style)}",
                )
        ax.set_title(panel_label(panel), fontsize=9)
        ax.set_xlabel("N")
        ax.set_ylim(-0.02, 1.02)
        ax.axhline(0.05, color="grey", linewidth=0.6)
    axes[0, 0].set_ylabel(ylabel)
    handles, labels = axes.ravel()[0].get_legend_handles_labels()
    if handles:
        fig.legend(handles, labels, loc="lower center", ncol=2, fontsize=7, frameon=False)
    fig.tight_layout(rect=(0, 0.08 + 0.02 * len(styles), 1, 1))
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_bias_histograms(results: list[CellResult], path: Path) -> Path | None:
    """Per-condition relative-frequency histograms of estimate bias."""
    cells = results[:MAX_HIST_PANELS]
    if not cells:
        return None
    n_cols = min(4, len(cells))
    n_rows = (len(cells) + n_cols - 1) // n_cols
    fig, axes = plt.subplots(
        n_rows, n_cols, figsize=(3.2 * n_cols, 2.6 * n_rows), squeeze=False
    )
    for ax in axes.ravel()[len(cells):]:
        ax.set_visible(False)
    for i, cell in enumerate(cells):
        ax = axes.ravel()[i]
        for method in METHODS:
            bias = np.array([
                rec.estimate - cell.condition.theta_m
                for rec in cell.records
                if rec.method == method and not rec.failed and np.isfinite(rec.estimate)
            ])
            if bias.size == 0:
                continue
            spread = max(bias.max() - bias.min(), 1e-6)
            bins = histogram_bins(bias, spread / 20.0)
            ax.bar(
                bins[:, 0], bins[:, 2],
                width=bins[:, 1] - bins[:, 0],
                align="edge", alpha=0.55,
                color=METHOD_COLORS[method], label=method,
            )
        ax.axvline(0.0, color="black", linewidth=0.6)
        ax.set_title(cell.condition.label(), fontsize=7)
    axes[0, 0].set_ylabel("relative frequency")
    handles, labels = axes.ravel()[0].get_legend_handles_labels()
    if handles:
        fig.legend(handles, labels, loc="lower center", ncol=2, fontsize=8, frameon=False)
    fig.tight_layout(rect=(0, 0.08, 1, 1))
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_mc_figures(results: list[CellResult], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    p = render_rate_curves(results, out_dir / "rejection_rates.png")
    if p:
        written.append(p)
    p = render_bias_histograms(results, out_dir / "bias_histograms.png")
    if p:
        written.append(p)
    return written
