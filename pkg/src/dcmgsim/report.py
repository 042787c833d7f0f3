"""Figure rendering: panels of a run trace drawn to static image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .trace import SimTrace

PANELS = ("voltages", "currents", "apvd", "indicators", "compensation")


class PlotError(ValueError):
    """Requested channels missing from the trace."""


def _unit_ids(trace: SimTrace, prefix: str) -> list[int]:
    ids = [int(c[len(prefix) + 1:]) for c in trace.columns
           if c.startswith(prefix + "_") and c[len(prefix) + 1:].isdigit()]
    return sorted(ids)


def _panel_voltages(ax, trace: SimTrace):
    t = trace.times
    for n in _unit_ids(trace, "V"):
        ax.plot(t, trace.col(f"V_{n}"), lw=0.8, label=f"unit {n}")
    ax.axhline(trace.meta.get("v_ref", 48.0), color="k", ls=":", lw=0.8)
    ax.set_ylabel("PCC voltage (V)")
    ax.legend(ncol=4, fontsize=7, loc="lower right")


def _panel_currents(ax, trace: SimTrace):
    t = trace.times
    for n in _unit_ids(trace, "Ipu"):
        ax.plot(t, trace.col(f"Ipu_{n}"), lw=0.8, label=f"unit {n}")
    ax.set_ylabel("current (p.u.)")


def _panel_apvd(ax, trace: SimTrace):
    t = trace.times
    for n in _unit_ids(trace, "Verr"):
        ax.plot(t, trace.col(f"Verr_{n}"), lw=0.8)
    ax.plot(t, trace.meta.get("v_ref", 48.0) - trace.col("vavg"),
            "k--", lw=1.0, label="true deviation")
    ax.set_ylabel("est. avg deviation (V)")
    ax.legend(fontsize=7)


def _panel_indicators(ax, trace: SimTrace):
    t = trace.times
    for n in _unit_ids(trace, "d"):
        ax.plot(t, trace.col(f"d_{n}"), lw=0.8)
    thr = trace.meta.get("alarm_threshold")
    if thr:
        ax.axhline(thr, color="r", ls="--", lw=1.0, label="threshold")
        ax.legend(fontsize=7)
    ax.set_ylabel("indicator (V s)")


def _panel_compensation(ax, trace: SimTrace):
    t = trace.times
    for n in _unit_ids(trace, "C"):
        ax.plot(t, trace.col(f"C_{n}"), lw=0.8)
    ax.set_ylabel("compensation (V)")


def _panel_residuals(ax, trace: SimTrace, link: tuple[int, int]):
    i, j = link
    t = trace.times
    missing = [c for c in (f"r_{i}_{j}_1", f"rbar_{i}_{j}_1") if c not in trace.columns]
    if missing:
        have = sorted({c.rsplit("_", 1)[0] for c in trace.columns if c.startswith("r_")})
        raise PlotError(f"no residual channels for link {link}; available: {have}")
    for comp, color in zip((1, 2, 3), ("C0", "C1", "C2")):
        ax.plot(t, trace.col(f"r_{i}_{j}_{comp}"), color=color, lw=0.8,
                label=f"component {comp}")
        ax.plot(t, trace.col(f"rbar_{i}_{j}_{comp}"), color=color, ls="--", lw=0.8)
        ax.plot(t, -trace.col(f"rbar_{i}_{j}_{comp}"), color=color, ls="--", lw=0.8)
    ax.set_ylabel(f"residual {i}<-{j}")
    ax.legend(fontsize=7)


def render(trace: SimTrace, panels: list[str], out_path: str | Path,
           links: list[tuple[int, int]] | None = None) -> Path:
    """Draw the requested panels stacked into one figure file.

    Panel names: voltages | currents | apvd | indicators | compensation |
    residuals (one subpanel per requested link).  The output format follows
    the file suffix; .svg keeps the figure vector-valued.
    """
    if not panels:
        raise PlotError(f"no panels requested; choose from {PANELS + ('residuals',)}")
    rows: list = []
    for p in panels:
        if p == "residuals":
            if not links:
                raise PlotError("residuals panel needs at least one --link i j")
            rows.extend(("residuals", lk) for lk in links)
        elif p in PANELS:
            rows.append((p, None))
        else:
            raise PlotError(f"unknown panel {p!r}; choose from {PANELS + ('residuals',)}")

    fig, axes = plt.subplots(len(rows), 1, figsize=(8, 2.2 * len(rows)),
                             sharex=True, squeeze=False)
    for ax, (name, arg) in zip(axes[:, 0], rows):
        if name == "voltages":
            _panel_voltages(ax, trace)
        elif name == "currents":
            _panel_currents(ax, trace)
        elif name == "apvd":
            _panel_apvd(ax, trace)
        elif name == "indicators":
            _panel_indicators(ax, trace)
        elif name == "compensation":
            _panel_compensation(ax, trace)
        else:
            _panel_residuals(ax, trace, arg)
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("time (s)")
    fig.suptitle(trace.meta.get("name", "run"), fontsize=10)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
