"""Figures written next to the CSV outputs.  Headless (Agg) only."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 4.5),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.linestyle": "--",
    "grid.linewidth": 0.5,
    "grid.alpha": 0.6,
    "lines.linewidth": 1.6,
    "font.size": 10,
    "savefig.bbox": "tight",
    # fixed metadata so repeated runs write identical files
    "svg.hashsalt": "viscsplat",
}
QUARTILE_COLORS = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a")


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_metrics(metrics, path):
    """Loss, PSNR and per-quartile step length against iteration."""
    it = np.array([m.iteration for m in metrics])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(14.0, 4.0))
        ax = axes[0]
        ax.semilogy(it, [m.loss_total for m in metrics], label="total")
        ax.semilogy(it, [m.loss_photometric for m in metrics], label="photometric", alpha=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend()
        ax = axes[1]
        ax.plot(it, [m.psnr for m in metrics], label="train view")
        hold = [m.psnr_holdout for m in metrics]
        if any(h is not None for h in hold):
            ax.plot(it, [np.nan if h is None else h for h in hold], label="held-out")
        ax.set_xlabel("iteration")
        ax.set_ylabel("PSNR (dB)")
        ax.legend()
        ax = axes[2]
        for q, col in enumerate(QUARTILE_COLORS):
            vals = np.array([getattr(m, "step_q%d" % (q + 1)) for m in metrics])
            ax.semilogy(it, np.where(vals > 0, vals, np.nan), color=col, label="scale Q%d" % (q + 1))
        ax.set_xlabel("iteration")
        ax.set_ylabel("median |step|")
        ax.legend(fontsize=8)
        _save(fig, path)


def plot_scaling(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        s = report.scales
        ax.loglog(s, report.grad_mu, "o-", label="|dL/dmu|")
        ax.loglog(s, report.grad_s, "s-", label="|dL/ds|")
        ax.loglog(s, report.grad_c, "^-", label="|dL/dc|", alpha=0.7)
        ref = report.grad_mu[0] * (s / s[0]) ** -1.0
        ax.loglog(s, ref, "k--", lw=0.8, label="slope -1")
        ax.set_xlabel("Gaussian scale (pixels)")
        ax.set_ylabel("footprint-normalised gradient")
        ax.set_title("fitted slope %.3f  [%.3f, %.3f]" % (report.slope, *report.slope_ci))
        ax.legend()
        _save(fig, path)


def plot_series(x, series: dict, path, xlabel="step", ylabel="value", logy=False):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, y in series.items():
            (ax.semilogy if logy else ax.plot)(x, y, label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend()
        _save(fig, path)


def plot_ablation(rows, path, key="psnr"):
    """Per-variant values (one dot per seed) with the mean as a bar."""
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, name in enumerate(variants):
            vals = np.array([r[key] for r in rows if r["variant"] == name], dtype=float)
            ax.bar(k, vals.mean(), color="#cccccc", edgecolor="k", width=0.6)
            ax.plot(np.full(len(vals), k), vals, "o", color="#d95f02", ms=4)
        ax.set_xticks(range(len(variants)))
        ax.set_xticklabels(variants, rotation=20, ha="right")
        lo = min(r[key] for r in rows)
        hi = max(r[key] for r in rows)
        pad = max(0.5, 0.1 * (hi - lo))
        ax.set_ylim(lo - pad, hi + pad)
        ax.set_ylabel(key)
        _save(fig, path)
