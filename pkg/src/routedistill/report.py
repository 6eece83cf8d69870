"""Report emission: delimited CSV artifacts plus rendered figures.

CSVs are the canonical, byte-reproducible outputs: '\n' newlines, floats
at six significant digits, integers verbatim. Each figure is a PNG saved
next to the CSV it visualizes; figures are a convenience layer and carry
no data the CSVs do not.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt

RC = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
    "legend.frameon": False,
}
matplotlib.rcParams.update(RC)


def fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(value)
    return format(float(value), ".6g")


def write_csv(path: str | Path, header: list[str], rows: list[tuple]) -> Path:
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="")
    return path


def save_fig(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def line_plot(path, xs, series: dict[str, list], xlabel: str, ylabel: str, logy: bool = False):
    fig, ax = plt.subplots()
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.2, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    if len(series) > 1:
        ax.legend()
    return save_fig(fig, path)


def loss_curve_plot(path, rows, step_col: int = 0, value_col: int = 1, label: str = "loss"):
    xs = [r[step_col] for r in rows]
    ys = [max(r[value_col], 1e-12) for r in rows]
    fig, ax = plt.subplots()
    ax.plot(xs, ys, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel(label)
    ax.set_yscale("log")
    return save_fig(fig, path)


def per_layer_curve_plot(path, rows, ylabel: str):
    """rows of (step, layer, value): one log-scale line per layer."""
    layers = sorted({r[1] for r in rows})
    fig, ax = plt.subplots()
    for layer in layers:
        pts = [(r[0], max(r[2], 1e-12)) for r in rows if r[1] == layer]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], linewidth=1.0, label=f"layer {layer + 1}")
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    return save_fig(fig, path)


def tradeoff_plot(path, xs, success, flops, xlabel: str):
    fig, ax = plt.subplots()
    ax.plot(xs, success, marker="o", markersize=4, linewidth=1.2, label="success rate")
    ax.plot(xs, flops, marker="s", markersize=4, linewidth=1.2, label="FLOPs ratio")
    ax.set_xlabel(xlabel)
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    return save_fig(fig, path)


def bar_plot(path, labels, values, xlabel: str, ylabel: str):
    fig, ax = plt.subplots()
    ax.bar([str(x) for x in labels], values, color="#4878a8")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0.0, 1.05)
    return save_fig(fig, path)


def gate_heatmap(path, gate_rows, n_layers: int, n_episodes: int):
    """gate_rows of (episode, layer, g, executed) -> episodes x layers heatmap."""
    import numpy as np

    grid = np.zeros((n_episodes, n_layers))
    for ep, layer, g, _ in gate_rows:
        grid[ep, layer] = g
    fig, ax = plt.subplots()
    im = ax.imshow(grid.T, aspect="auto", origin="lower", cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xlabel("episode")
    ax.set_ylabel("layer")
    fig.colorbar(im, ax=ax, label="gate")
    return save_fig(fig, path)
