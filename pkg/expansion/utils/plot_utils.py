"""
SVG panels for expansion curves, shot histograms and coherence lengths.

Figures are rendered with the Agg backend and a fixed SVG hash salt, with the
date metadata removed, so repeated runs give identical files. Every panel is
written next to the CSV that holds its data.
"""
import logging
from typing import Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from simulator.analytic_dynamics import ExpansionCurve  # noqa: E402
from simulator.estimation import CoherenceCurve  # noqa: E402
from simulator.trajectory_ensemble import EnsembleResult  # noqa: E402
from utils.file_utils import atomic_path  # noqa: E402

_logger = logging.getLogger(__name__)

SVG_RC = {"svg.hashsalt": "expansion", "svg.fonttype": "none"}


def _save_svg(fig, filepath: str) -> None:
    with atomic_path(filepath) as tmp_path:
        fig.savefig(tmp_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    _logger.info("Figure written to '%s'", filepath)


def plot_expansion_curves(filepath: str, curves: Sequence[Tuple[str, ExpansionCurve]],
                          title: Optional[str] = None) -> None:
    """
    sigma(t_r) of one or more curves in nm against t_r in us.

    Curves named ``free`` are dashed; curves with errors are drawn as points with error bars.
    """
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, curve in curves:
            t_us, sigma_nm = curve.times * 1e6, curve.sigma * 1e9
            if curve.sigma_err is not None:
                ax.errorbar(t_us, sigma_nm, yerr=curve.sigma_err * 1e9, fmt="s", ms=4, capsize=2, label=label)
            else:
                ax.plot(t_us, sigma_nm, "--" if label == "free" else "-", label=label)
        ax.set_xlabel(r"release time $t_r$ ($\mu$s)")
        ax.set_ylabel(r"$\sigma$ (nm)")
        ax.set_yscale("log")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        _save_svg(fig, filepath)


def plot_shot_histogram(filepath: str, result: EnsembleResult, title: Optional[str] = None) -> None:
    """2D (z, p) histogram with the position marginal and its Gaussian fit underneath."""
    histogram = result.histogram2d
    z_edges, p_edges = histogram.position_edges, histogram.momentum_edges
    with plt.rc_context(SVG_RC):
        fig, (ax_2d, ax_z) = plt.subplots(2, 1, figsize=(5, 6), sharex=True,
                                          gridspec_kw={"height_ratios": [3, 1]})
        ax_2d.pcolormesh(z_edges * 1e9, p_edges, histogram.counts.T, cmap="viridis")
        ax_2d.set_ylabel(r"$p$ (kg m/s)")
        if title:
            ax_2d.set_title(title)

        # Marginal with the Gaussian of the sample mean and sigma
        marginal = histogram.counts.sum(axis=1)
        centers = 0.5 * (z_edges[:-1] + z_edges[1:])
        widths = np.diff(z_edges)
        ax_z.bar(centers * 1e9, marginal, width=widths * 1e9, color="0.7")
        valid = [s.reconstructed_position for s in result.shots if s.valid]
        mean, sigma = float(np.mean(valid)), result.position_sigma
        if sigma > 0:
            grid = np.linspace(z_edges[0], z_edges[-1], 200)
            density = np.exp(-0.5 * ((grid - mean) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
            ax_z.plot(grid * 1e9, density * histogram.total * float(np.mean(widths)), "k-")
        ax_z.set_xlabel(r"$z$ (nm)")
        ax_z.set_ylabel("counts")
        fig.tight_layout()
        _save_svg(fig, filepath)


def plot_coherence(filepath: str, curve: CoherenceCurve, title: Optional[str] = None) -> None:
    """xi(t) for the fitted and the reduced heating, with the ground-state threshold."""
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        t_us = curve.times * 1e6
        ax.plot(t_us, curve.xi * 1e12, "-", label="fitted heating")
        ax.plot(t_us, curve.xi_improved * 1e12, "-", label=f"heating x {curve.heating_scale:g}")
        ax.axhline(curve.xi_zpm_threshold * 1e12, color="k", ls=":", label="ground state")
        ax.set_xlabel(r"release time $t_r$ ($\mu$s)")
        ax.set_ylabel(r"$\xi$ (pm)")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        _save_svg(fig, filepath)
