"""Static SVG line plots for experiment curves (byte-stable across runs)."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def curve_svg(title: str, xlabel: str, x, series: dict[str, list], ylabel: str = "") -> str:
    with plt.rc_context({"svg.hashsalt": "tokenhorizon", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for name in series:
            ax.plot(list(x), list(series[name]), marker="o", label=name)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        if ylabel:
            ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        if series:
            ax.legend(fontsize=7)
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def result_svgs(result) -> dict[str, str]:
    """One SVG per curve of an ExperimentResult, keyed by a file-name stem."""
    out = {}
    for title, (xlabel, x, series) in result.curves.items():
        stem = f"{result.experiment_id}_" + "_".join(title.replace("-", " ").split())
        out[stem] = curve_svg(title, xlabel, x, series)
    return out
