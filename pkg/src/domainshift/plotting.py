"""Accuracy-versus-divergence figures rendered from sweep results.

Two figure kinds:

* ``acc_vs_kl``: one algorithm, one line per target-training size, mean
  test accuracy against mean KL divergence with a +/- std band.
* ``model_comparison``: one target-training size, one line per algorithm
  (and per lambda schedule when several were swept).

Figures are written as SVG through matplotlib with a pinned hash salt and
no date metadata, so the same input produces the same bytes. Every series
carries a ``series-<label>`` group id in the SVG for structural checks.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import ADVERSARIAL_ALGORITHMS, SweepResult, summarize

__all__ = ["FilterError", "FIGURE_KINDS", "render_figure"]

FIGURE_KINDS = ("acc_vs_kl", "model_comparison")

_RC = {
    "svg.hashsalt": "domainshift",
    "figure.figsize": (8.0, 5.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 9,
}


class FilterError(ValueError):
    """Raised when the requested filters leave no rows to plot."""


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "-" for c in str(text))


def _filter_rows(result: SweepResult, algorithm: str | None,
                 target_size: int | None,
                 lambda_schedule: str | None) -> SweepResult:
    rows = [r for r in result.rows if r.status == "ok"]
    if algorithm is not None:
        rows = [r for r in rows if r.algorithm == algorithm]
    if target_size is not None:
        rows = [r for r in rows if r.target_size == target_size]
    if lambda_schedule is not None:
        rows = [r for r in rows if r.lambda_schedule == lambda_schedule]
    if not rows:
        raise FilterError("no rows matched the requested filters")
    return SweepResult(rows)


def _series(groups: list[dict], key_cols: tuple[str, ...]):
    """Split summary rows into labeled series sorted by mean KL."""
    by_label: dict[str, list[dict]] = {}
    for g in groups:
        label = " ".join(str(g[c]) for c in key_cols)
        by_label.setdefault(label, []).append(g)
    for label in sorted(by_label):
        pts = sorted(by_label[label], key=lambda g: g["mean_kl"])
        x = np.array([p["mean_kl"] for p in pts])
        y = np.array([p["mean_accuracy"] for p in pts])
        err = np.array([p["std_accuracy"] for p in pts])
        yield label, x, y, err


def render_figure(result: SweepResult, figure: str, out_path: str | Path,
                  algorithm: str | None = None, target_size: int | None = None,
                  lambda_schedule: str | None = None) -> Path:
    """Render one figure to ``out_path`` and return the path."""
    if figure == "acc_vs_kl":
        if algorithm is None:
            raise ValueError("acc_vs_kl needs an algorithm to plot")
        filtered = _filter_rows(result, algorithm, target_size, lambda_schedule)
        groups = summarize(filtered, ("sigma", "target_size", "algorithm",
                                      "lambda_schedule"))
        series = list(_series(groups, ("target_size",)))
        title = f"{algorithm}: test accuracy vs divergence"
        legend_title = "target size"
    elif figure == "model_comparison":
        if target_size is None:
            raise ValueError("model_comparison needs a target size to fix")
        filtered = _filter_rows(result, algorithm, target_size, lambda_schedule)
        groups = summarize(filtered, ("sigma", "target_size", "algorithm",
                                      "lambda_schedule"))
        multi_schedule = len({g["lambda_schedule"] for g in groups
                              if g["algorithm"] in ADVERSARIAL_ALGORITHMS}) > 1
        key_cols = ("algorithm", "lambda_schedule") if multi_schedule else ("algorithm",)
        series = list(_series(groups, key_cols))
        title = f"model comparison (target size = {target_size})"
        legend_title = "algorithm"
    else:
        raise ValueError(f"unknown figure kind {figure!r}; "
                         f"choose from {FIGURE_KINDS}")

    out_path = Path(out_path)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for label, x, y, err in series:
            line, = ax.plot(x, y, marker="o", markersize=3, label=label,
                            gid=f"series-{_slug(label)}")
            ax.fill_between(x, y - err, y + err, alpha=0.15,
                            color=line.get_color(),
                            gid=f"band-{_slug(label)}")
        ax.set_xlabel("KL(source, target) [nats]")
        ax.set_ylabel("target test accuracy")
        ax.set_title(title)
        ax.legend(title=legend_title)
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out_path
