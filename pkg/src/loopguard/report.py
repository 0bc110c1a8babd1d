"""Trace persistence, run reports and figure rendering.

Every run writes one trace.csv (fixed 15-column schema, reals at 9
significant digits, booleans as 0/1), one report.json, and a set of PNG
figures rendered from the same rows: loop signals, residual powers against
their thresholds, and the per-window flag raster.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .runner import TRACE_COLUMNS  # noqa: E402

_BOOL_COLUMNS = {"f_speed", "f_ctrl", "f_dc_load", "f_dc_res"}


def _format_cell(column, value):
    if column == "label":
        return value
    if column in _BOOL_COLUMNS:
        return str(int(value))
    return f"{float(value):.9g}"


def write_trace_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in rows:
            writer.writerow([_format_cell(c, row[c]) for c in TRACE_COLUMNS])
    return path


def write_report_json(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_calibration_json(path, calibration):
    with open(path, "w") as fh:
        json.dump(calibration.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def render_figures(out_dir, rows, title):
    """Render the run's figures next to the delimited output."""
    t = [r["t"] for r in rows]
    paths = []

    fig, axes = plt.subplots(3, 1, figsize=(9, 7), sharex=True)
    axes[0].plot(t, [r["reference"] for r in rows], "k--", lw=1, label="reference")
    axes[0].plot(t, [r["y_true"] for r in rows], lw=1, label="true output")
    axes[0].plot(t, [r["y_reported"] for r in rows], lw=0.8, alpha=0.7,
                 label="reported output")
    axes[0].set_ylabel("output")
    axes[0].legend(loc="best", fontsize=8)
    axes[1].plot(t, [r["u_applied"] for r in rows], lw=1, color="tab:orange")
    axes[1].set_ylabel("command held")
    axes[2].plot(t, [r["i_dc"] for r in rows], lw=1, color="tab:green")
    axes[2].set_ylabel("context (A)")
    axes[2].set_xlabel("time (s)")
    axes[0].set_title(f"{title}: loop signals")
    fig.tight_layout()
    path = os.path.join(out_dir, "fig_signals.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    paths.append(path)

    fig, axes = plt.subplots(3, 1, figsize=(9, 7), sharex=True)
    floor = 1e-12
    axes[0].semilogy(t, [max(r["r_speed_pow"], floor) for r in rows], lw=1,
                     label="plant residual power")
    axes[0].semilogy(t, [max(r["g_speed"], floor) for r in rows], "k--", lw=1,
                     label="threshold")
    axes[0].legend(loc="best", fontsize=8)
    axes[0].set_ylabel("plant")
    axes[1].semilogy(t, [max(r["r_ctrl_pow"], floor) for r in rows], lw=1,
                     color="tab:red")
    axes[1].set_ylabel("controller")
    axes[2].semilogy(t, [max(r["r_dc_pow"], floor) for r in rows], lw=1,
                     color="tab:green")
    axes[2].set_ylabel("context")
    axes[2].set_xlabel("time (s)")
    axes[0].set_title(f"{title}: residual powers")
    fig.tight_layout()
    path = os.path.join(out_dir, "fig_residuals.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(9, 3))
    names = ["f_speed", "f_ctrl", "f_dc_load", "f_dc_res"]
    for i, name in enumerate(names):
        on = [r["t"] for r in rows if r[name]]
        ax.scatter(on, [i] * len(on), s=4, marker="|")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.set_xlim(t[0] if t else 0.0, t[-1] if t else 1.0)
    ax.set_xlabel("time (s)")
    ax.set_title(f"{title}: asserted flags")
    fig.tight_layout()
    path = os.path.join(out_dir, "fig_flags.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    paths.append(path)
    return paths
