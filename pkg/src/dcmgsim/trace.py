"""Run records: fixed-order CSV trace, JSON-lines event log, summary JSON."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class SimTrace:
    """Time-indexed record of one simulation run.

    data holds one row per saved step in the fixed column order of
    `columns`; events is the chronological list of discrete happenings
    (initialization, operations, alarms, threshold crossings).
    """

    columns: list[str]
    data: np.ndarray
    events: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {name: k for k, name in enumerate(self.columns)}

    @property
    def times(self) -> np.ndarray:
        return self.col("t")

    def col(self, name: str) -> np.ndarray:
        return self.data[:, self._index[name]]

    def group(self, prefix: str) -> np.ndarray:
        """Stack of all columns named `<prefix>_<unit>` in unit order."""
        names = [c for c in self.columns
                 if c.startswith(prefix + "_") and c[len(prefix) + 1:].isdigit()]
        names.sort(key=lambda c: int(c[len(prefix) + 1:]))
        if not names:
            raise KeyError(f"no columns with prefix {prefix!r}")
        return np.stack([self.col(c) for c in names], axis=1)

    @property
    def indicators(self) -> np.ndarray:
        return self.group("d")

    def window(self, t_from: float, t_to: float | None = None) -> np.ndarray:
        t = self.times
        mask = t >= t_from
        if t_to is not None:
            mask &= t <= t_to
        return mask

    # -- derived quantities ------------------------------------------------

    def steady_apvd(self, tail: float = 1.0) -> float:
        """Tail-averaged deviation of the true average PCC voltage (V)."""
        mask = self.window(self.times[-1] - tail)
        return float(np.mean(self.col("vavg")[mask]) - self.meta["v_ref"])

    def steady_current_spread(self, tail: float = 1.0) -> float:
        """Tail-averaged spread of per-unit currents across connected units."""
        ipu = self.group("Ipu")
        active = [self.meta["nodes"].index(n) for n in self.meta["active_at_end"]]
        mask = self.window(self.times[-1] - tail)
        spread = ipu[mask][:, active].max(axis=1) - ipu[mask][:, active].min(axis=1)
        return float(np.mean(spread))

    def apvd_fit(self, span: float = 5.0) -> tuple[float, float]:
        """(slope V/s, mean offset V) of the average deviation over the tail."""
        mask = self.window(self.times[-1] - span)
        t = self.times[mask]
        dev = self.col("vavg")[mask] - self.meta["v_ref"]
        slope, intercept = np.polyfit(t, dev, 1)
        return float(slope), float(np.mean(dev))

    def classification(self, slope_tol: float = 5e-3, offset_tol: float = 5e-3) -> str:
        slope, offset = self.apvd_fit()
        if abs(slope) > slope_tol:
            return "ramp"
        if abs(offset) > offset_tol:
            return "constant"
        return "none"

    def alarm_times(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for ev in self.events:
            if ev.get("kind") == "alarm" and ev["unit"] not in out:
                out[ev["unit"]] = ev["t"]
        return out

    def summary(self) -> dict:
        slope, offset = self.apvd_fit()
        out = {
            "schema_version": self.meta.get("schema_version"),
            "scenario": self.meta.get("name"),
            "fidelity": self.meta.get("fidelity"),
            "seed": self.meta.get("seed"),
            "t_end": float(self.times[-1]),
            "steady_apvd": self.steady_apvd(),
            "steady_current_spread": self.steady_current_spread(),
            "apvd_slope_fit": slope,
            "apvd_offset_fit": offset,
            "classification": self.classification(),
            "alarm_times": {str(k): v for k, v in sorted(self.alarm_times().items())},
            "uio_crossings": self.meta.get("uio_crossings", 0),
            "dac_crossings": self.meta.get("dac_crossings", 0),
            "max_uio_margin": self.meta.get("max_uio_margin"),
            "max_dac_margin": self.meta.get("max_dac_margin"),
            "max_indicator": float(np.max(self.indicators)),
            "active_at_end": list(self.meta.get("active_at_end", [])),
            "v_ref": self.meta.get("v_ref"),
            "alarm_threshold": self.meta.get("alarm_threshold"),
            "nodes": list(self.meta.get("nodes", [])),
        }
        return out

    # -- serialization -------------------------------------------------------

    def save(self, outdir: str | Path) -> dict[str, Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = {
            "trace": outdir / "trace.csv",
            "events": outdir / "events.jsonl",
            "summary": outdir / "summary.json",
        }
        write_csv(paths["trace"], self.columns, self.data)
        with open(paths["events"], "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")
        with open(paths["summary"], "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return paths


def write_csv(path: str | Path, columns: list[str], data: np.ndarray):
    """Decimal text, 9 significant digits, fixed column order."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in np.atleast_2d(data):
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def read_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def load_trace_dir(outdir: str | Path) -> SimTrace:
    """Rebuild a SimTrace from a saved output directory."""
    outdir = Path(outdir)
    columns, data = read_csv(outdir / "trace.csv")
    events, meta = [], {}
    ev_path = outdir / "events.jsonl"
    if ev_path.exists():
        events = [json.loads(line) for line in ev_path.read_text().splitlines() if line]
    summ = outdir / "summary.json"
    if summ.exists():
        s = json.loads(summ.read_text())
        meta = {"name": s.get("scenario"), "v_ref": s.get("v_ref"),
                "alarm_threshold": s.get("alarm_threshold"),
                "nodes": s.get("nodes", []),
                "active_at_end": s.get("active_at_end", []),
                "fidelity": s.get("fidelity"), "seed": s.get("seed"),
                "schema_version": s.get("schema_version")}
    return SimTrace(columns=columns, data=data, events=events, meta=meta)


def stealth_report(attacked: SimTrace, clean: SimTrace) -> dict:
    """Residual and trajectory deltas between an attacked run and its twin.

    The twin shares seed and noise; for a residual-invisible injection the
    per-link residual difference is numerical round-off while the secondary
    inputs drift apart.
    """
    res_cols = [c for c in attacked.columns if c.startswith("r_")]
    diff = {c: float(np.max(np.abs(attacked.col(c) - clean.col(c))))
            for c in res_cols}
    psi_gap = float(np.max(np.abs(attacked.group("psi") - clean.group("psi"))))
    return {
        "max_residual_diff": max(diff.values(), default=0.0),
        "per_link_residual_diff": diff,
        "max_psi_diff": psi_gap,
        "attacked_crossings": attacked.meta.get("uio_crossings", 0),
        "clean_crossings": clean.meta.get("uio_crossings", 0),
    }
