"""SVG figures for the analytics and experiment outputs (matplotlib, Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed hash salt keeps SVG output byte-stable across runs
_RC = {"svg.hashsalt": "fedeca", "svg.fonttype": "none", "figure.figsize": (6.0, 4.0), "axes.spines.top": False, "axes.spines.right": False}

_ARM_LABELS = {None: "all", -1: "all", 0: "control", 1: "treated"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_km(curves, path, title="Weighted Kaplan-Meier"):
    """Step curves with exponential-Greenwood bands, one per arm."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for curve in curves:
            t = np.concatenate([[0.0], curve.times])
            s = np.concatenate([[1.0], curve.survival])
            lo = np.concatenate([[1.0], curve.ci_low])
            hi = np.concatenate([[1.0], curve.ci_high])
            label = _ARM_LABELS.get(curve.arm, str(curve.arm))
            (line,) = ax.step(t, s, where="post", label=label)
            ax.fill_between(t, lo, hi, step="post", alpha=0.2, color=line.get_color(), linewidth=0)
        ax.set_xlabel("time")
        ax.set_ylabel("survival probability")
        ax.set_ylim(0.0, 1.02)
        ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)


def plot_smd(report, path, threshold=0.1):
    """Per-covariate SMD before and after weighting."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        y = np.arange(len(report.covariates))
        ax.scatter(report.smd_before, y, marker="o", label="before weighting")
        ax.scatter(report.smd_after, y, marker="x", label="after weighting")
        for x in (-threshold, threshold):
            ax.axvline(x, color="grey", linestyle="--", linewidth=0.8)
        ax.set_yticks(y, report.covariates)
        ax.set_xlabel("standardized mean difference")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_smd_curve(rows, path, threshold=0.1):
    """Mean absolute SMD against covariate shift, one line per method."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        methods = list(dict.fromkeys(r["method"] for r in rows))
        for m in methods:
            sub = [r for r in rows if r["method"] == m]
            ax.plot([r["shift"] for r in sub], [r["mean_abs_smd_after"] for r in sub], marker="o", label=m)
        ax.axhline(threshold, color="grey", linestyle="--", linewidth=0.8)
        ax.set_xlabel("covariate shift")
        ax.set_ylabel("mean |SMD|")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_power(rows, path, level=0.05):
    """Rejection rate with CLT bands against the sweep value."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        keys = list(dict.fromkeys((r["method"], r["variance"]) for r in rows))
        for method, variance in keys:
            sub = [r for r in rows if (r["method"], r["variance"]) == (method, variance)]
            x = np.array([float(r["value"]) for r in sub])
            rate = np.array([r["rate"] for r in sub])
            (line,) = ax.plot(x, rate, marker="o", label=f"{method} ({variance})")
            ax.fill_between(x, [r["band_low"] for r in sub], [r["band_high"] for r in sub], alpha=0.2, color=line.get_color(), linewidth=0)
        ax.axhline(level, color="grey", linestyle="--", linewidth=0.8)
        ax.set_xlabel(rows[0]["axis"] if rows else "")
        ax.set_ylabel("rejection rate")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(frameon=False)
        _save(fig, path)


def plot_equivalence(rows, path):
    """Boxplots of log10 relative errors per quantity and number of centers."""
    from fedeca.experiments import EQUIVALENCE_QUANTITIES

    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7.0, 4.0))
        ks = sorted({r["n_centers"] for r in rows})
        data, labels = [], []
        for q in EQUIVALENCE_QUANTITIES:
            for k in ks:
                v = np.array([r[q] for r in rows if r["n_centers"] == k])
                data.append(np.log10(np.maximum(v, 1e-17)))
                labels.append(f"{q[4:]}\nK={k}")
        ax.boxplot(data)
        ax.set_xticks(np.arange(1, len(labels) + 1), labels, fontsize=7)
        ax.set_ylabel("log10 relative error")
        _save(fig, path)
