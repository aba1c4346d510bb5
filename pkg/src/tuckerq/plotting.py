"""Figures written next to the CSV/JSON reports."""

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .tensorfile import atomic_write  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    buf = io.BytesIO()
    # metadata stripped so identical inputs give identical bytes
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())
    return path


def plot_ratio_report(rows, path):
    """Per-layer parameter/MAC compression ratios and reconstruction error."""
    names = [r["name"] for r in rows]
    x = range(len(rows))
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        width = 0.4
        ax1.bar([i - width / 2 for i in x], [r["param_ratio"] for r in rows], width, label="params")
        ax1.bar([i + width / 2 for i in x], [r["macs_ratio"] for r in rows], width, label="MACs")
        ax1.axhline(1.0, color="0.5", lw=0.8, ls="--")
        ax1.set_xticks(list(x), names, rotation=45, ha="right")
        ax1.set_ylabel("compression ratio")
        ax1.legend(frameon=False)
        ax2.bar(list(x), [r["rel_error"] for r in rows], color="tab:red")
        ax2.set_xticks(list(x), names, rotation=45, ha="right")
        ax2.set_ylabel("relative kernel error")
        fig.tight_layout()
        return _save(fig, path)


def plot_search_trace(plan, path):
    """Metric after every rank step of a greedy search, accepted vs rejected."""
    steps = [rec.step for rec in plan.audit]
    metrics = [rec.metric_after for rec in plan.audit]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(steps, metrics, color="0.6", lw=0.8)
        ok = [(s, m) for s, m, rec in zip(steps, metrics, plan.audit) if rec.accepted]
        bad = [(s, m) for s, m, rec in zip(steps, metrics, plan.audit) if not rec.accepted]
        if ok:
            ax.scatter(*zip(*ok), s=14, color="tab:green", label="accepted", zorder=3)
        if bad:
            ax.scatter(*zip(*bad), s=14, color="tab:red", marker="x", label="rejected", zorder=3)
        ax.axhline(plan.threshold, color="k", lw=0.8, ls="--", label="threshold")
        ax.set_xlabel("rank step")
        ax.set_ylabel("metric")
        ax.set_title(f"{plan.algorithm}-pass search, total rank {plan.total_rank()}")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_baselines(rows, path):
    """Relative error against parameter compression for each factorization."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for r in rows:
            ax.scatter(r["param_ratio"], r["rel_error"], s=20)
            ax.annotate(r["method"], (r["param_ratio"], r["rel_error"]), fontsize=7,
                        xytext=(3, 3), textcoords="offset points")
        ax.set_xlabel("parameter compression ratio")
        ax.set_ylabel("relative kernel error")
        fig.tight_layout()
        return _save(fig, path)
