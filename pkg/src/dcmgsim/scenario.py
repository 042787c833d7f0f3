"""Scenario configuration: grid tables, event calendar, file formats.

Scenario files are TOML (commentable, human-editable) with a pinned
schema_version.  Attack files share the format; fake inputs are written as
`fake_input = { const = [2.0, 0.0] }` or
`fake_input = { sin = { amp = 1.0, freq_rad = 4.0, component = 1 } }`
(components are 1-based in files).  Built-in scenarios live as package
data and load through the same parser the CLI uses.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - version shim
    import tomli as tomllib

from .attacks import AttackSpec, ConstantInput, SineInput, SumInput
from .countermeasure import CountermeasureConfig
from .netgraph import Topology
from .plant import DEFAULT_PRIMARY_POLES, DguParams

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    """Raised for malformed scenario or attack files."""


# --- events ---------------------------------------------------------------

@dataclass(frozen=True)
class LinesConnect:
    t: float


@dataclass(frozen=True)
class CommActivate:
    t: float


@dataclass(frozen=True)
class PlugOut:
    t: float
    node: int


@dataclass(frozen=True)
class PlugIn:
    t: float
    node: int


@dataclass(frozen=True)
class LoadScale:
    t: float
    factor: float


@dataclass(frozen=True)
class MtdPerturb:
    t: float


DAILY_OP_KINDS = (PlugOut, PlugIn, LoadScale)


def _event_label(ev) -> str:
    if isinstance(ev, PlugOut):
        return f"plug_out_{ev.node}@{ev.t:g}s"
    if isinstance(ev, PlugIn):
        return f"plug_in_{ev.node}@{ev.t:g}s"
    if isinstance(ev, LoadScale):
        return f"load_scale_{ev.factor:g}@{ev.t:g}s"
    return f"{type(ev).__name__}@{ev.t:g}s"


# --- the scenario ---------------------------------------------------------

@dataclass
class DetectorConfig:
    uio_poles: tuple = (-50.0, -60.0, -70.0)
    dac_uio_poles: tuple = (-60.0, -80.0)
    uio_floor: float = 1e-9         # additive slack on the link envelopes
    dac_eps0: float = 1e-6          # assumed initial error bound, DAC observers
    dac_floor: float = 1e-8


@dataclass
class ScenarioConfig:
    name: str
    topology: Topology
    dgus: dict[int, DguParams]
    t_end: float = 20.0
    dt_full: float = 5e-5
    dt_reduced: float = 1e-3
    trace_dt: float = 1e-3
    fidelity: str = "full"
    seed: int = 1
    v_ref: float = 48.0
    k_I: float = 5.0
    noise_scale: float = 1.0
    primary_poles: tuple = DEFAULT_PRIMARY_POLES
    dac_a: float = 100.0
    dac_gamma: float = 1.0
    mtd_period: float = 0.0         # 0 disables periodic parameter hopping
    countermeasure: CountermeasureConfig = field(default_factory=CountermeasureConfig)
    detectors: DetectorConfig = field(default_factory=DetectorConfig)
    initially_active: tuple = ()    # nodes wired up at the connect event
    events: list = field(default_factory=list)
    attacks: list = field(default_factory=list)

    def __post_init__(self):
        if self.fidelity not in ("full", "reduced"):
            raise ScenarioError(f"fidelity must be full|reduced, got {self.fidelity}")
        if not self.initially_active:
            self.initially_active = tuple(self.topology.nodes)
        missing = set(self.topology.nodes) - set(self.dgus)
        if missing:
            raise ScenarioError(f"no unit parameters for nodes {sorted(missing)}")
        for p in self.dgus.values():
            p.v_ref = self.v_ref
        self.events = sorted(self.events, key=lambda e: e.t)
        if self.events and self.t_end < self.events[-1].t:
            raise ScenarioError("t_end precedes the last event")
        comm_t = self.comm_time()
        for a in self.attacks:
            if comm_t is None or a.t_start < comm_t:
                raise ScenarioError("attack starts before the communication "
                                    "layer is active")

    # -- timing helpers --

    @property
    def dt(self) -> float:
        return self.dt_full if self.fidelity == "full" else self.dt_reduced

    def comm_time(self) -> float | None:
        for ev in self.events:
            if isinstance(ev, CommActivate):
                return ev.t
        return None

    def init_events(self) -> list:
        return [e for e in self.events if isinstance(e, (LinesConnect, CommActivate))]

    def operations(self) -> list:
        return [e for e in self.events if isinstance(e, DAILY_OP_KINDS)]

    def mtd_events(self) -> list:
        evs = [e for e in self.events if isinstance(e, MtdPerturb)]
        if self.mtd_period > 0:
            comm = self.comm_time() or 0.0
            t = comm + self.mtd_period
            while t <= self.t_end:
                evs.append(MtdPerturb(t))
                t += self.mtd_period
        return sorted(evs, key=lambda e: e.t)

    # -- derived variants --

    def _clone(self, **changes) -> "ScenarioConfig":
        out = copy.deepcopy(self)
        for key, value in changes.items():
            setattr(out, key, value)
        out.__post_init__()
        return out

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return self._clone(seed=seed)

    def with_fidelity(self, fidelity: str) -> "ScenarioConfig":
        return self._clone(fidelity=fidelity)

    def with_attacks(self, attacks: list) -> "ScenarioConfig":
        return self._clone(attacks=list(attacks))

    def with_events(self, extra: list) -> "ScenarioConfig":
        return self._clone(events=self.events + list(extra))

    def with_countermeasure(self, **changes) -> "ScenarioConfig":
        return self._clone(countermeasure=replace(self.countermeasure, **changes))

    def monitor_only(self) -> "ScenarioConfig":
        out = self._clone(attacks=[])
        out.countermeasure = replace(out.countermeasure, enabled=False)
        return out

    def without_operations(self) -> "ScenarioConfig":
        keep = [e for e in self.events if not isinstance(e, DAILY_OP_KINDS + (MtdPerturb,))]
        return self._clone(events=keep, attacks=[], mtd_period=0.0)

    def single_operation_variants(self):
        """(scenario, label) pairs isolating each tolerated daily operation."""
        base = self.without_operations()
        for op in self.operations():
            yield base.with_events([op]), _event_label(op)

    # -- prediction helpers --

    @property
    def n_consensus_units(self) -> int:
        """Units participating in averaging when attacks run (no ops applied)."""
        return len(self.initially_active)

    def link_geometry(self, link: tuple[int, int]):
        """Per-link constants for the closed-form impact formulas.

        Built for the initially-active wiring, i.e. the grid state attack
        scenarios are in when the injection starts.
        """
        from .attacks import LinkGeometry
        from .plant import assemble_matrices, synthesize_gain

        i, j = link
        key = (min(i, j), max(i, j))
        if key not in self.topology.edges:
            raise ScenarioError(f"link {link} is not a communication edge")
        members = set(self.initially_active)
        cond = {}
        for (a, b), c in self.topology.edges.items():
            if a in members and b in members:
                if a == j:
                    cond[b] = c
                elif b == j:
                    cond[a] = c
        p = self.dgus[j]
        gain = (np.asarray(p.gain, dtype=float) if p.gain is not None
                else synthesize_gain(p, self.primary_poles))
        plant = assemble_matrices(p, cond, gain)
        return LinkGeometry(plant=plant, comm_weight=self.topology.edges[key],
                            rated_sender=p.I_s, label=(i, j))


# --- TOML loading ----------------------------------------------------------

def _parse_fake_input(table) -> object:
    if isinstance(table, list):
        return ConstantInput(tuple(float(v) for v in table))
    if not isinstance(table, dict) or len(table) == 0:
        raise ScenarioError(f"cannot parse fake_input {table!r}")
    parts = []
    for key, val in table.items():
        if key == "const":
            parts.append(ConstantInput(tuple(float(v) for v in val)))
        elif key == "sin":
            comp = int(val.get("component", 1)) - 1
            m = int(val.get("m", 2))
            parts.append(SineInput(amp=float(val["amp"]),
                                   freq_rad=float(val["freq_rad"]),
                                   component=comp, m_total=m))
        else:
            raise ScenarioError(f"unknown fake_input kind {key!r}")
    return parts[0] if len(parts) == 1 else SumInput(tuple(parts))


def parse_attacks(doc: dict) -> list[AttackSpec]:
    out = []
    for row in doc.get("attack", []):
        spec = AttackSpec(
            link=(int(row["link"][0]), int(row["link"][1])),
            t_start=float(row["t_start"]),
            fake_input=_parse_fake_input(row["fake_input"]),
            layer=row.get("layer", "dgu"),
            knowledge_time=(float(row["knowledge_time"])
                            if "knowledge_time" in row else None),
            init_offset=row.get("init_offset"),
            extra_forcing=row.get("extra_forcing"),
            label=row.get("label", ""),
        )
        out.append(spec)
    if not out:
        raise ScenarioError("attack file defines no [[attack]] entries")
    return out


def load_attacks(path_or_name: str | Path) -> list[AttackSpec]:
    text = _read_config_text(path_or_name, kind="attack")
    return parse_attacks(tomllib.loads(text))


_EVENT_PARSERS = {
    "lines_connect": lambda row: LinesConnect(t=float(row["t"])),
    "comm_activate": lambda row: CommActivate(t=float(row["t"])),
    "plug_out": lambda row: PlugOut(t=float(row["t"]), node=int(row["node"])),
    "plug_in": lambda row: PlugIn(t=float(row["t"]), node=int(row["node"])),
    "load_scale": lambda row: LoadScale(t=float(row["t"]), factor=float(row["factor"])),
    "mtd_perturb": lambda row: MtdPerturb(t=float(row["t"])),
}


def parse_scenario(doc: dict, name_hint: str = "scenario") -> ScenarioConfig:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {version!r} "
                            f"(this build reads {SCHEMA_VERSION})")
    try:
        grid = doc.get("grid", {})
        sim = doc.get("sim", {})
        noise = doc.get("noise", {})
        rho = np.asarray(noise.get("rho_bar", [0.0, 0.0, 0.0]), dtype=float)
        omega = np.asarray(noise.get("omega_bar", [0.0, 0.0, 0.0]), dtype=float)

        dgus = {}
        for row in doc["dgu"]:
            dgus[int(row["id"])] = DguParams(
                R_t=float(row["R_t"]), L_t=float(row["L_t"]), C_t=float(row["C_t"]),
                I_L=float(row["I_L"]), I_s=float(row["I_s"]),
                v_ref=float(grid.get("v_ref", 48.0)),
                gain=row.get("gain"), rho_bar=rho.copy(), omega_bar=omega.copy(),
            )
        edges, dacw = {}, {}
        for row in doc["line"]:
            i, j = (int(v) for v in row["between"])
            key = (min(i, j), max(i, j))
            edges[key] = 1.0 / float(row["R"])
            if "dac_weight" in row:
                dacw[key] = float(row["dac_weight"])
        topo = Topology(tuple(sorted(dgus)), edges, dacw)

        init = doc.get("init", {})
        events = []
        if "connect_t" in init:
            events.append(LinesConnect(t=float(init["connect_t"])))
        if "comm_t" in init:
            events.append(CommActivate(t=float(init["comm_t"])))
        for row in doc.get("event", []):
            kind = row["kind"]
            if kind not in _EVENT_PARSERS:
                raise ScenarioError(f"unknown event kind {kind!r}")
            events.append(_EVENT_PARSERS[kind](row))

        cm = doc.get("countermeasure", {})
        ctrl = doc.get("control", {})
        det = doc.get("detectors", {})
        dac = doc.get("dac", {})
        cfg = ScenarioConfig(
            name=doc.get("name", name_hint),
            topology=topo,
            dgus=dgus,
            t_end=float(sim.get("t_end", 20.0)),
            dt_full=float(sim.get("dt_full", 5e-5)),
            dt_reduced=float(sim.get("dt_reduced", 1e-3)),
            trace_dt=float(sim.get("trace_dt", 1e-3)),
            fidelity=sim.get("fidelity", "full"),
            seed=int(sim.get("seed", 1)),
            v_ref=float(grid.get("v_ref", 48.0)),
            k_I=float(grid.get("k_I", 5.0)),
            noise_scale=float(noise.get("scale", 1.0)),
            primary_poles=tuple(ctrl.get("primary_poles", DEFAULT_PRIMARY_POLES)),
            dac_a=float(dac.get("a", 100.0)),
            dac_gamma=float(dac.get("gamma", 1.0)),
            mtd_period=float(dac.get("mtd_period", 0.0)),
            countermeasure=CountermeasureConfig(
                window=float(cm.get("window", 0.65)),
                threshold=float(cm.get("threshold", 0.0325)),
                delta=float(cm.get("delta", 0.005)),
                k_cp=float(cm.get("k_cp", 1.0)),
                k_ci=float(cm.get("k_ci", 20.0)),
                enabled=bool(cm.get("enabled", True)),
            ),
            detectors=DetectorConfig(
                uio_poles=tuple(ctrl.get("uio_poles", (-50.0, -60.0, -70.0))),
                dac_uio_poles=tuple(ctrl.get("dac_uio_poles", (-60.0, -80.0))),
                uio_floor=float(det.get("uio_floor", 1e-9)),
                dac_eps0=float(det.get("dac_eps0", 1e-6)),
                dac_floor=float(det.get("dac_floor", 1e-8)),
            ),
            initially_active=tuple(init.get("initially_active", ())),
        )
        cfg.events = sorted(cfg.events + events, key=lambda e: e.t)
        cfg.__post_init__()
        return cfg
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from exc


def builtin_names() -> list[str]:
    files = resources.files("dcmgsim").joinpath("scenarios")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".toml"))


def _read_config_text(path_or_name: str | Path, kind: str = "scenario") -> str:
    path = Path(path_or_name)
    if path.suffix == ".toml" and path.exists():
        return path.read_text()
    candidate = resources.files("dcmgsim").joinpath(f"scenarios/{path_or_name}.toml")
    if candidate.is_file():
        return candidate.read_text()
    raise ScenarioError(f"{kind} {path_or_name!r} is neither a file nor one of "
                        f"the built-ins {builtin_names()}")


def load_scenario(path_or_name: str | Path) -> ScenarioConfig:
    text = _read_config_text(path_or_name, kind="scenario")
    return parse_scenario(tomllib.loads(text), name_hint=str(path_or_name))
