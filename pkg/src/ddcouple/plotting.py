"""SVG line plots of the comparison metrics.

Every plotted number is read from the metrics CSV, so the figures are a
pure view of the table. Output is deterministic (fixed SVG id salt, no
date stamp).
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

MODE_ORDER = ("FFF", "FRF", "FRR", "RRR")
STYLES = {"FFF": ("tab:blue", "o"), "FRF": ("tab:orange", "s"),
          "FRR": ("tab:green", "^"), "RRR": ("tab:red", "v")}

PANELS = {
    "iterations.svg": ("Optimisation iterations", ("iterations",), False),
    "functional.svg": ("Interface functional J", ("J",), True),
    "velocity_errors.svg": ("Relative velocity error", ("err_u1", "err_u2"), True),
    "pressure_errors.svg": ("Relative pressure error", ("err_p1", "err_p2"), True),
}


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _series(rows, mode, column):
    pts = [(float(r["time"]), float(r[column])) for r in rows if r["mode"] == mode]
    pts.sort()
    return [p[0] for p in pts], [p[1] for p in pts]


def _label(rows, mode):
    stagnated = any(r.get("status") == "stagnated" for r in rows if r["mode"] == mode)
    return f"{mode} (stagnated)" if stagnated else mode


def plot_metrics(csv_path, out_dir) -> list[Path]:
    """Write the four comparison panels next to ``csv_path``; returns the paths."""
    rows = read_metrics(csv_path)
    out_dir = Path(out_dir)
    modes = [m for m in MODE_ORDER if any(r["mode"] == m for r in rows)]
    written = []
    with plt.rc_context({"svg.hashsalt": "ddcouple", "svg.fonttype": "none"}):
        for name, (title, columns, logy) in PANELS.items():
            fig, ax = plt.subplots(figsize=(6.4, 4.2))
            for mode in modes:
                color, marker = STYLES[mode]
                for col, ls in zip(columns, ("-", "--")):
                    t, v = _series(rows, mode, col)
                    if logy:
                        v = [max(x, 1e-300) for x in v]
                    suffix = f" {col.split('_')[-1]}" if len(columns) > 1 else ""
                    ax.plot(t, v, ls, color=color, marker=marker, markersize=3,
                            label=_label(rows, mode) + suffix)
            if logy:
                ax.set_yscale("log")
            ax.set_xlabel("time")
            ax.set_title(title)
            ax.grid(True, which="both", alpha=0.3)
            ax.legend(fontsize=8)
            fig.tight_layout()
            path = out_dir / name
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written
