"""Matplotlib report figures rendered alongside the delimited exports."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .inference import PosteriorSummary

__all__ = ["render_figures"]


def _save(fig, outdir: str, name: str, written: list):
    path = os.path.join(outdir, name)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)


def render_figures(summary: PosteriorSummary, outdir: str) -> list[str]:
    """Trace plots, tau posterior densities, FDR curve and inclusion heatmap."""
    written: list[str] = []

    if summary.size_traces and any(len(t) for t in summary.size_traces):
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
        for i, (size, lp) in enumerate(zip(summary.size_traces, summary.logpost_traces)):
            ax1.plot(size, lw=0.6, label=f"chain {i}")
            ax2.plot(lp, lw=0.6)
        ax1.set_ylabel("selected edges")
        ax2.set_ylabel("log posterior")
        ax2.set_xlabel("recorded iteration")
        ax1.legend(loc="best", fontsize=8)
        fig.suptitle("Chain traces")
        fig.tight_layout()
        _save(fig, outdir, "trace.png", written)

    if summary.tau_quantiles:
        med = summary.tau_quantiles["median"]
        lo = summary.tau_quantiles["q025"]
        hi = summary.tau_quantiles["q975"]
        idx = np.arange(len(med))
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.errorbar(idx, med, yerr=[np.subtract(med, lo), np.subtract(hi, med)],
                    fmt="o", capsize=4)
        ax.set_xticks(idx)
        ax.set_xticklabels([f"source {j+1}" for j in idx], rotation=20)
        ax.set_ylabel("score weight")
        ax.set_title("Score-weight posterior (median, 95% interval)")
        fig.tight_layout()
        _save(fig, outdir, "tau_posterior.png", written)

    if summary.fdr_table:
        cutoffs = [row[0] for row in summary.fdr_table]
        fdrs = [row[2] for row in summary.fdr_table]
        counts = [row[1] for row in summary.fdr_table]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(cutoffs, fdrs, "o-")
        ax.set_xlabel("posterior probability cutoff")
        ax.set_ylabel("Bayesian FDR")
        ax2 = ax.twinx()
        ax2.plot(cutoffs, counts, "s--", color="tab:gray", alpha=0.6)
        ax2.set_ylabel("selected edges", color="tab:gray")
        ax.set_title("False discovery rate by cutoff")
        fig.tight_layout()
        _save(fig, outdir, "fdr_curve.png", written)

    fig, ax = plt.subplots(figsize=(6, 4.5))
    im = ax.imshow(summary.P, aspect="auto", cmap="viridis", vmin=0, vmax=1)
    ax.set_xlabel("regulator")
    ax.set_ylabel("target")
    ax.set_title("Marginal inclusion probabilities")
    fig.colorbar(im, ax=ax, label="P(edge)")
    fig.tight_layout()
    _save(fig, outdir, "inclusion_probabilities.png", written)
    return written
