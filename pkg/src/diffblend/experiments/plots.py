"""SVG figures with deterministic output (fixed hash salt, no date metadata)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "svg.hashsalt": "diffblend",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
}
MARKERS = {"morl_oracle": "*", "db_mpa": "o", "rs_learned": "s", "rgg": "^", "code": "D",
           "pretrained": "x", "best_of_n": "v"}


def _save(fig, path: Path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def pareto_plot(summary: list[dict], path, labels=("r1", "r2")) -> Path:
    """Scatter of pooled ``(E[r1], E[r2])`` per method and ``w``; the oracle is joined by a line."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 4.0))
        for method in sorted({r["method"] for r in summary}):
            rows = sorted((r for r in summary if r["method"] == method), key=lambda r: r["w"])
            xs = [r["r1_mean"] for r in rows]
            ys = [r["r2_mean"] for r in rows]
            ax.errorbar(xs, ys, xerr=[r["r1_se"] for r in rows], yerr=[r["r2_se"] for r in rows],
                        fmt=MARKERS.get(method, "o"), ms=6 if method != "morl_oracle" else 9,
                        ls="-" if method == "morl_oracle" else "none", label=method, capsize=2)
            for r in rows:
                ax.annotate(f"{r['w']:g}", (r["r1_mean"], r["r2_mean"]), fontsize=6,
                            xytext=(3, 3), textcoords="offset points")
        ax.set_xlabel(f"E[{labels[0]}]")
        ax.set_ylabel(f"E[{labels[1]}]")
        ax.legend(fontsize=7, loc="best")
        ax.set_title("Reward trade-off by method (labels: w)")
        fig.tight_layout()
        _save(fig, path)
    return path


def kla_plot(summary: list[dict], path) -> Path:
    """Expected reward against lambda for the blend and the per-lambda oracle, with W1 on a twin axis."""
    path = Path(path)
    rows = sorted(summary, key=lambda r: r["lambda"])
    lam = [r["lambda"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.6))
        ax.errorbar(lam, [r["kla_mean"] for r in rows], yerr=[r["kla_se"] for r in rows],
                    fmt="o-", label="db_kla", capsize=2)
        ax.errorbar(lam, [r["oracle_mean"] for r in rows], yerr=[r["oracle_se"] for r in rows],
                    fmt="*--", ms=8, label="oracle (alpha / lambda)", capsize=2)
        ax.set_xlabel("lambda")
        ax.set_ylabel("E[r]")
        ax2 = ax.twinx()
        ax2.plot(lam, [r["w1"] for r in rows], "s:", color="tab:gray", label="W1 to oracle")
        ax2.set_ylabel("W1(db_kla, oracle)")
        ax2.grid(False)
        h1, l1 = ax.get_legend_handles_labels()
        h2, l2 = ax2.get_legend_handles_labels()
        ax.legend(h1 + h2, l1 + l2, fontsize=7, loc="upper left")
        fig.tight_layout()
        _save(fig, path)
    return path
