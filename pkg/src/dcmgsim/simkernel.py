"""Deterministic fixed-step integration of the coupled grid.

Between discrete events (initialization switches, plug-in/out, load steps,
attack onsets, defense parameter hops, phase transitions of the
countermeasure) the entire coupled system - plants, secondary consensus,
estimators, observers, injection generators, compensators - is one linear
ODE  x' = A x + B w  with w piecewise constant over a step (noise is
sampled once per step; loads and references are constants).  Classical RK4
applied to such a segment collapses to the polynomial one-step map

    x+ = R x + S w,    R = sum_{q<=4} (hA)^q / q!,
                       S = h (I + hA/2 + (hA)^2/6 + (hA)^3/24) B,

which the engine precomputes per segment and re-derives whenever an event
changes the wiring.  When a segment's spectral radius would leave the RK4
stability region the step is split into equal substeps of the same map
(the map stays a power of an RK4 step, so determinism and the stealth
cancellation algebra are untouched).

State and input layouts are fixed for the whole run; inactive blocks
(links not yet established, attacks not yet started, units not plugged in)
simply have zero rows until their activation event.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dac as dacmod
from . import uio as uiomod
from .attacks import AttackSpec, ConstantInput, SineInput, SumInput
from .countermeasure import CountermeasureBank
from .netgraph import build_laplacian, connected_components
from .plant import DguParams, assemble_matrices, synthesize_gain
from .scenario import (CommActivate, LinesConnect, LoadScale, MtdPerturb,
                       PlugIn, PlugOut, ScenarioConfig, SCHEMA_VERSION)
from .trace import SimTrace


class SimulationError(RuntimeError):
    """Aborted run: disconnection, misaligned events, or non-finite state."""


class _Layout:
    def __init__(self):
        self.slices: dict[str, slice] = {}
        self.n = 0

    def alloc(self, name: str, size: int) -> slice:
        sl = slice(self.n, self.n + size)
        self.slices[name] = sl
        self.n += size
        return sl

    def __getitem__(self, name: str) -> slice:
        return self.slices[name]

    def __contains__(self, name: str) -> bool:
        return name in self.slices


@dataclass
class _AttackRuntime:
    spec: AttackSpec
    sl: slice                     # phi block in the state vector
    n: int
    A_snap: np.ndarray | None = None
    Ebar: np.ndarray | None = None
    const_drive: np.ndarray | None = None   # folded constant forcing
    sines: list | None = None               # [(drive_vec, freq, osc_slice)]
    active: bool = False


def _waveform_parts(wave):
    if isinstance(wave, ConstantInput):
        return [("const", np.asarray(wave.value, dtype=float))]
    if isinstance(wave, SineInput):
        return [("sin", wave)]
    if isinstance(wave, SumInput):
        out = []
        for p in wave.parts:
            out.extend(_waveform_parts(p))
        return out
    raise SimulationError(
        "only const/sin/sum fake inputs are integrable by the kernel; "
        f"got {type(wave).__name__}")


class _Engine:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.full = cfg.fidelity == "full"
        self.nodes = list(cfg.topology.nodes)
        self.nidx = {node: k for k, node in enumerate(self.nodes)}
        self.N = len(self.nodes)
        self.dt = cfg.dt
        self.nsteps = self._steps_of(cfg.t_end, "t_end")
        self.stride = max(1, self._steps_of(cfg.trace_dt, "trace_dt"))
        self.rng = np.random.default_rng(cfg.seed)

        # per-unit closed-loop matrices; gains synthesized once per unit
        self.params: dict[int, DguParams] = cfg.dgus
        self.gains = {}
        for node, p in self.params.items():
            self.gains[node] = (np.asarray(p.gain, dtype=float) if p.gain is not None
                                else synthesize_gain(p, cfg.primary_poles))

        # directed communication links (receiver, sender)
        self.links = []
        for (a, b) in sorted(cfg.topology.edges):
            self.links.append((a, b))
            self.links.append((b, a))
        self.lidx = {lk: k for k, lk in enumerate(self.links)}
        self.L = len(self.links)

        # observers keyed by the monitored (sending) unit; their matrices only
        # involve the current row of A_k, which line coupling never touches,
        # so one synthesis per unit covers every wiring configuration
        self.uio = {}
        self.uio_th = {}
        scale = cfg.noise_scale
        for node in self.nodes:
            plant = self._plant(node, coupled=False)
            u = uiomod.synthesize_uio(plant.A_k, plant.Ebar, cfg.detectors.uio_poles)
            p = self.params[node]
            self.uio[node] = u
            self.uio_th[node] = uiomod.threshold_params(
                u, plant.b, self.gains[node],
                scale * p.rho_bar, scale * p.omega_bar,
                floor=cfg.detectors.uio_floor)

        # estimator-state observers (identical for every link)
        self.base_dac = dacmod.DacParams(a=cfg.dac_a, gamma=cfg.dac_gamma)
        self.base_dac_weights = dict(cfg.topology.dac_weights)
        self.dac_params = self.base_dac
        self.dac_weights = dict(self.base_dac_weights)
        self.dac_history = [(0.0, cfg.dac_a)]
        self._synth_dac_uios()

        # mutable wiring state
        self.members: set[int] = set(cfg.initially_active)
        self.lines_on = False
        self.comm_on = False
        self.iL = np.array([self.params[n].I_L for n in self.nodes])
        self.bias = np.zeros(self.N)
        self.link_active = np.zeros(self.L, dtype=bool)
        self.link_t0 = np.zeros(self.L)
        self.dac_link_t0 = np.zeros(self.L)
        self.corrupted: set[int] = set()
        self.bank = CountermeasureBank(cfg.countermeasure, self.N, self.dt)

        self._alloc_state()
        self._alloc_inputs()
        self._alloc_rows()
        self._build_calendar()
        self._stack_thresholds()

        self.events_log: list[dict] = []
        self.uio_crossings = 0
        self.dac_crossings = 0
        self.max_uio_margin = -np.inf
        self.max_dac_margin = -np.inf
        self._uio_first: dict = {}
        self._dac_first: dict = {}
        self._last_rbar = np.zeros((self.L, 3))
        self._last_dacmargin = -np.ones(self.L)

    # ---- setup -----------------------------------------------------------

    def _steps_of(self, t: float, what: str) -> int:
        steps = round(t / self.dt)
        if abs(steps * self.dt - t) > 1e-9:
            raise SimulationError(f"{what}={t} is not a multiple of dt={self.dt}")
        return steps

    def _plant(self, node: int, coupled: bool = True):
        cond = {}
        if coupled and self.lines_on:
            for (a, b), c in self.cfg.topology.edges.items():
                if a in self.members and b in self.members:
                    if a == node:
                        cond[b] = c
                    elif b == node:
                        cond[a] = c
        return assemble_matrices(self.params[node], cond, self.gains[node])

    def _synth_dac_uios(self):
        d = self.dac_params
        poles = self.cfg.detectors.dac_uio_poles
        self.dac_uio_v = uiomod.synthesize_uio(d.A1, d.B1, poles)
        self.dac_uio_e = uiomod.synthesize_uio(d.A2, d.B2, poles)

    def _alloc_state(self):
        lay = _Layout()
        N = self.N
        if self.full:
            lay.alloc("plant", 3 * N)
        lay.alloc("psi", N)
        lay.alloc("dacx1", 2 * N)
        lay.alloc("dacx2", 2 * N)
        lay.alloc("compq", N)
        if self.full:
            for (i, j) in self.links:
                lay.alloc(f"uio:{i}:{j}", 3)
            for (i, j) in self.links:
                lay.alloc(f"duv:{i}:{j}", 2)
                lay.alloc(f"due:{i}:{j}", 2)
        self.attacks: list[_AttackRuntime] = []
        for k, spec in enumerate(self.cfg.attacks):
            n = 3 if spec.layer == "dgu" else 2
            rt = _AttackRuntime(spec=spec, sl=lay.alloc(f"atk{k}", n), n=n)
            rt.sines = []
            for kind, payload in _waveform_parts(spec.fake_input):
                if kind == "sin":
                    rt.sines.append([None, payload, lay.alloc(f"osc{k}:{len(rt.sines)}", 2)])
            self.attacks.append(rt)
        self.lay = lay
        self.nx = lay.n

    def _alloc_inputs(self):
        lay = _Layout()
        if self.full:
            lay.alloc("omega", 3 * self.N)
            lay.alloc("rho", 3 * self.N)
        lay.alloc("iL", self.N)
        lay.alloc("one", 1)
        self.wlay = lay
        self.nw = lay.n
        self.rho_bounds = self.cfg.noise_scale * np.stack(
            [self.params[n].rho_bar for n in self.nodes])
        self.omega_bounds = self.cfg.noise_scale * np.stack(
            [self.params[n].omega_bar for n in self.nodes])
        self.noisy = self.full and self.cfg.noise_scale > 0 and (
            self.rho_bounds.any() or self.omega_bounds.any())

    def _alloc_rows(self):
        lay = _Layout()
        N = self.N
        for name in ("V", "Ipu", "psi", "vhat", "verr", "ctot"):
            lay.alloc(name, N)
        lay.alloc("vavg", 1)
        if self.full:
            lay.alloc("res", 3 * self.L)
            lay.alloc("resv", 2 * self.L)
            lay.alloc("rese", 2 * self.L)
        self.rlay = lay
        self.nrows = lay.n

        cols = ["t"]
        for prefix in ("V", "Ipu", "psi", "Vhat", "Verr", "d", "C", "alarm"):
            cols += [f"{prefix}_{n}" for n in self.nodes]
        cols.append("vavg")
        if self.full:
            for (i, j) in self.links:
                cols += [f"r_{i}_{j}_{c}" for c in (1, 2, 3)]
            for (i, j) in self.links:
                cols += [f"rbar_{i}_{j}_{c}" for c in (1, 2, 3)]
            for (i, j) in self.links:
                cols.append(f"rdacmargin_{i}_{j}")
        self.columns = cols

    def _stack_thresholds(self):
        """Per-link envelope constants, stacked for vector evaluation.

        The envelope decomposes as decay * P + C with a per-link scalar
        decay = kappa e^{-mu (t - t0)} that the loop advances by one
        multiplication per step.
        """
        if not self.full:
            return
        sig, wbar, direct, kap, mu = [], [], [], [], []
        for (i, j) in self.links:
            th = self.uio_th[j]
            sig.append(th.sigma2_bar0)
            wbar.append(th.w_bar)
            direct.append(th.direct + th.floor)
            kap.append(th.kappa)
            mu.append(th.mu)
        self.th_sig = np.array(sig)
        self.th_wbar = np.array(wbar)
        self.th_direct = np.array(direct)
        self.th_kap = np.array(kap)[:, None]
        self.th_mu = np.array(mu)[:, None]
        self.th_P = self.th_sig - self.th_wbar / self.th_mu
        self.th_C = self.th_kap / self.th_mu * self.th_wbar + self.th_direct
        self._uio_decay = self.th_kap.copy()               # value at t = t0
        self._uio_decay_step = np.exp(-self.th_mu * self.dt)
        self._dac_decay = np.zeros(self.L)
        self._refresh_dac_decay_consts()

    def _refresh_dac_decay_consts(self):
        det = self.cfg.detectors
        self._dac_decay_step = float(np.exp(-self.dac_uio_v.mu * self.dt))
        self._dac_decay_init = self.dac_uio_v.kappa * det.dac_eps0
        self._dac_floor = det.dac_floor

    def _build_calendar(self):
        cal: dict[int, list] = {}

        def add(step, kind, payload):
            cal.setdefault(step, []).append((kind, payload))

        for ev in self.cfg.events:
            if isinstance(ev, MtdPerturb):
                continue
            add(self._steps_of(ev.t, "event time"), type(ev).__name__, ev)
        for ev in self.cfg.mtd_events():
            add(self._steps_of(ev.t, "mtd time"), "MtdPerturb", ev)
        for idx, rt in enumerate(self.attacks):
            add(self._steps_of(rt.spec.t_start, "attack start"), "AttackOn", idx)
        # same-step ordering: wiring first, then comms, then attacks/defense
        order = {"LinesConnect": 0, "PlugOut": 1, "PlugIn": 1, "LoadScale": 1,
                 "CommActivate": 2, "AttackOn": 3, "MtdPerturb": 4}
        self.calendar = {s: sorted(evs, key=lambda e: order[e[0]])
                         for s, evs in cal.items()}

    # ---- event application -------------------------------------------------

    def _log(self, t, kind, **details):
        self.events_log.append({"t": round(t, 9), "kind": kind, **details})

    def _active_edges(self):
        return {e: c for e, c in self.cfg.topology.edges.items()
                if e[0] in self.members and e[1] in self.members}

    def _check_connected(self, verb: str):
        comps = connected_components(sorted(self.members), list(self._active_edges()))
        if len(comps) > 1:
            raise SimulationError(
                f"{verb} would split the grid; components "
                + ", ".join(str(sorted(c)) for c in comps))

    def _refresh_link_activity(self):
        for k, (i, j) in enumerate(self.links):
            want = (self.comm_on and i in self.members and j in self.members)
            self.link_active[k] = want

    def _init_link_states(self, x, w, t, link_ids):
        """(Re)start the observers of the given links from current data."""
        for k in link_ids:
            i, j = self.links[k]
            jj = self.nidx[j]
            u = self.uio[j]
            y = x[self.lay["plant"]][3 * jj:3 * jj + 3].copy()
            if self.noisy:
                y += w[self.wlay["rho"]][3 * jj:3 * jj + 3]
            for rt in self.attacks:
                if rt.active and rt.spec.layer == "dgu" and rt.spec.link == (i, j):
                    y += x[rt.sl]
            x[self.lay[f"uio:{i}:{j}"]] = u.T @ y
            self.link_t0[k] = t
            self._uio_decay[k, 0] = self.th_kap[k, 0]
            self._init_dac_link(x, t, k)

    def _init_dac_link(self, x, t, k):
        i, j = self.links[k]
        jj = self.nidx[j]
        x1 = x[self.lay["dacx1"]][2 * jj:2 * jj + 2].copy()
        x2 = x[self.lay["dacx2"]][2 * jj:2 * jj + 2].copy()
        for rt in self.attacks:
            if rt.active and rt.spec.link == (i, j):
                if rt.spec.layer == "dac_x1":
                    x1 += x[rt.sl]
                elif rt.spec.layer == "dac_x2":
                    x2 += x[rt.sl]
        x[self.lay[f"duv:{i}:{j}"]] = self.dac_uio_v.T @ x1
        x[self.lay[f"due:{i}:{j}"]] = self.dac_uio_e.T @ x2
        self.dac_link_t0[k] = t
        self._dac_decay[k] = self._dac_decay_init

    def _warm_dac_states(self, x, w, nodes):
        """Start a unit's estimator at its measured voltage (no transient)."""
        a = self.dac_params.a
        volts = self._voltages(x, w)
        for node in nodes:
            i = self.nidx[node]
            sl1 = slice(self.lay["dacx1"].start + 2 * i,
                        self.lay["dacx1"].start + 2 * i + 2)
            sl2 = slice(self.lay["dacx2"].start + 2 * i,
                        self.lay["dacx2"].start + 2 * i + 2)
            x[sl1] = (0.0, volts[i] / (a * a))
            x[sl2] = 0.0

    def _voltages(self, x, w):
        """Measured PCC voltages in the current mode."""
        if self.full:
            v = x[self.lay["plant"]][0::3].copy()
            if self.noisy:
                v += w[self.wlay["rho"]][0::3]
            return v
        cm = self.cfg.countermeasure
        d = self.dac_params
        verr = self.cfg.v_ref - (
            x[self.lay["dacx1"]].reshape(self.N, 2) @ d.C1)
        comp = self.bias + self.bank.mitigating * (
            cm.k_cp * verr + cm.k_ci * x[self.lay["compq"]])
        return self.cfg.v_ref + x[self.lay["psi"]] + comp

    def _reset_unit(self, x, node):
        idx = self.nidx[node]
        x[self.lay["psi"]][idx] = 0.0
        x[self.lay["compq"]][idx] = 0.0
        self.bias[idx] = 0.0
        self.bank.reset_unit(idx)

    def _apply_event(self, kind, payload, x, w, t):
        if kind == "LinesConnect":
            self.lines_on = True
            self._log(t, "lines_connect", members=sorted(self.members))
        elif kind == "CommActivate":
            self.comm_on = True
            self._refresh_link_activity()
            self._warm_dac_states(x, w, self.nodes)
            for node in self.nodes:
                self.bank.reset_unit(self.nidx[node])
            if self.full:
                self._init_link_states(x, w, t, np.flatnonzero(self.link_active))
            self._log(t, "comm_activate", members=sorted(self.members))
        elif kind == "PlugOut":
            node = payload.node
            if node not in self.members:
                raise SimulationError(f"plug-out of {node}: not connected")
            self.members.discard(node)
            self._check_connected(f"plugging out unit {node}")
            self._reset_unit(x, node)
            if self.full:
                self._refresh_link_activity()
                for k, (i, j) in enumerate(self.links):
                    if node in (i, j) and not self.link_active[k]:
                        x[self.lay[f"uio:{i}:{j}"]] = 0.0
                        x[self.lay[f"duv:{i}:{j}"]] = 0.0
                        x[self.lay[f"due:{i}:{j}"]] = 0.0
            else:
                self._refresh_link_activity()
            self._log(t, "plug_out", node=node)
        elif kind == "PlugIn":
            node = payload.node
            if node in self.members:
                raise SimulationError(f"plug-in of {node}: already connected")
            self.members.add(node)
            self._check_connected(f"plugging in unit {node}")
            self._reset_unit(x, node)
            self._warm_dac_states(x, w, [node])
            fresh = []
            was = self.link_active.copy()
            self._refresh_link_activity()
            if self.full and self.comm_on:
                fresh = np.flatnonzero(self.link_active & ~was)
                self._init_link_states(x, w, t, fresh)
            self._log(t, "plug_in", node=node)
        elif kind == "LoadScale":
            self.iL = self.iL * payload.factor
            self._log(t, "load_scale", factor=payload.factor)
        elif kind == "MtdPerturb":
            lap = build_laplacian(self.cfg.topology, self.cfg.topology.dac_weights)
            evs = np.sort(np.linalg.eigvalsh(lap))[1:]
            vhat_old = x[self.lay["dacx1"]].reshape(self.N, 2) @ self.dac_params.C1
            self.dac_params, self.dac_weights = dacmod.mtd_perturb(
                self.base_dac, self.base_dac_weights, self.rng,
                laplacian_eigenvalues=evs)
            self.dac_history.append((t, self.dac_params.a))
            self._synth_dac_uios()
            self._refresh_dac_decay_consts()
            # switching units rebase their filter states so the estimate is
            # continuous across the hop, then re-seed the link observers
            if self.comm_on:
                a2 = self.dac_params.a ** 2
                for i in range(self.N):
                    sl1 = slice(self.lay["dacx1"].start + 2 * i,
                                self.lay["dacx1"].start + 2 * i + 2)
                    sl2 = slice(self.lay["dacx2"].start + 2 * i,
                                self.lay["dacx2"].start + 2 * i + 2)
                    x[sl1] = (0.0, vhat_old[i] / a2)
                    x[sl2] = 0.0
            if self.full:
                for k in np.flatnonzero(self.link_active):
                    self._init_dac_link(x, t, k)
            self._log(t, "mtd_perturb", a=self.dac_params.a)
        elif kind == "AttackOn":
            rt = self.attacks[payload]
            self._activate_attack(rt, x, t)
            self._log(t, "attack_on", link=list(rt.spec.link), layer=rt.spec.layer,
                      label=rt.spec.label)
        else:  # pragma: no cover
            raise SimulationError(f"unhandled event kind {kind}")

    def _dac_a_at(self, t: float) -> float:
        a = self.dac_history[0][1]
        for tt, val in self.dac_history:
            if tt <= t:
                a = val
        return a

    def _activate_attack(self, rt: _AttackRuntime, x, t):
        spec = rt.spec
        i, j = spec.link
        if (min(i, j), max(i, j)) not in self.cfg.topology.edges:
            raise SimulationError(f"attacked link {spec.link} is not an edge")
        if spec.layer == "dgu":
            plant = self._plant(j, coupled=True)
            rt.A_snap, rt.Ebar = plant.A_k, plant.Ebar
        elif spec.layer == "dac_x1":
            a_snap = self._dac_a_at(spec.knowledge_time if spec.knowledge_time
                                    is not None else t)
            snap = dacmod.DacParams(a=a_snap, gamma=self.dac_params.gamma)
            rt.A_snap, rt.Ebar = snap.A1, snap.B1
        else:
            rt.A_snap, rt.Ebar = self.dac_params.A2, self.dac_params.B2
        rt.const_drive = np.zeros(rt.n)
        for kind, payload in _waveform_parts(spec.fake_input):
            if kind == "const":
                rt.const_drive += rt.Ebar @ payload
        if spec.extra_forcing is not None:
            rt.const_drive = rt.const_drive + spec.extra_forcing
        for part in rt.sines:
            wave = part[1]
            unit = np.zeros(rt.Ebar.shape[1])
            unit[wave.component] = wave.amp
            part[0] = rt.Ebar @ unit
            p0 = np.array([math.sin(wave.freq_rad * t), math.cos(wave.freq_rad * t)])
            x[part[2]] = p0
        x[rt.sl] = 0.0 if spec.init_offset is None else spec.init_offset
        rt.active = True

    # ---- matrix assembly ---------------------------------------------------

    def _assemble(self):
        n, nw, N = self.nx, self.nw, self.N
        A = np.zeros((n, n))
        B = np.zeros((n, nw))
        lay, wlay, cfg = self.lay, self.wlay, self.cfg
        one = wlay["one"].start
        k_I = cfg.k_I
        rated = np.array([self.params[nd].I_s for nd in self.nodes])
        mit = self.bank.mitigating
        cm = cfg.countermeasure
        d = self.dac_params
        B1, C1 = d.B1.ravel(), d.C1
        B2, C2 = d.B2.ravel(), d.C2
        gamma = d.gamma

        psi = lay["psi"]
        x1s = lambda i: slice(lay["dacx1"].start + 2 * i, lay["dacx1"].start + 2 * i + 2)
        x2s = lambda i: slice(lay["dacx2"].start + 2 * i, lay["dacx2"].start + 2 * i + 2)
        qs = lay["compq"]

        active_edges = self._active_edges() if self.lines_on else {}
        comm_edges = (self._active_edges() if self.comm_on else {})

        atk_by_link = {}
        for rt in self.attacks:
            if rt.active:
                atk_by_link.setdefault((rt.spec.link, rt.spec.layer), rt)

        if self.full:
            pl = lambda i: slice(lay["plant"].start + 3 * i, lay["plant"].start + 3 * i + 3)
            for node in self.nodes:
                i = self.nidx[node]
                m = self._plant(node, coupled=True)
                sl = pl(i)
                A[sl, sl] = m.A_k
                for nb, block in m.coupling.items():
                    A[sl.start, pl(self.nidx[nb]).start] += block[0, 0]
                # secondary input feeds the tracking integral
                A[sl.start + 2, psi.start + i] += 1.0
                if mit[i]:
                    A[sl.start + 2, x1s(i)] += -cm.k_cp * C1
                    A[sl.start + 2, qs.start + i] += cm.k_ci
                if self.noisy:
                    B[sl, wlay["omega"].start + 3 * i:wlay["omega"].start + 3 * i + 3] = np.eye(3)
                    B[sl, wlay["rho"].start + 3 * i:wlay["rho"].start + 3 * i + 3] = \
                        np.outer(m.b, m.gain)
                B[sl.start, wlay["iL"].start + i] = -1.0 / self.params[node].C_t
                B[sl.start + 2, one] = cfg.v_ref * (1.0 + (cm.k_cp if mit[i] else 0.0)) \
                    + self.bias[i]

            # consensus rows on measured per-unit currents
            for (a, b), cond in comm_edges.items():
                for (recv, send) in ((a, b), (b, a)):
                    i, j = self.nidx[recv], self.nidx[send]
                    A[psi.start + i, pl(i).start + 1] -= k_I * cond / rated[i]
                    A[psi.start + i, pl(j).start + 1] += k_I * cond / rated[j]
                    if self.noisy:
                        B[psi.start + i, wlay["rho"].start + 3 * i + 1] -= k_I * cond / rated[i]
                        B[psi.start + i, wlay["rho"].start + 3 * j + 1] += k_I * cond / rated[j]
                    rt = atk_by_link.get(((recv, send), "dgu"))
                    if rt is not None:
                        A[psi.start + i, rt.sl.start + 1] += k_I * cond / rated[j]
        else:
            # reduced model: PCC voltages are algebraic, v = v_ref + psi + c
            lapM = np.zeros((N, N))
            for (a, b), cond in active_edges.items():
                ia, ib = self.nidx[a], self.nidx[b]
                lapM[ia, ia] += cond
                lapM[ib, ib] += cond
                lapM[ia, ib] -= cond
                lapM[ib, ia] -= cond
            ltD = k_I * (lapM if self.comm_on else np.zeros_like(lapM)) @ np.diag(1 / rated)
            Qmat = ltD @ lapM
            # compensation c depends linearly on states: c = Mc x + c0
            Mc = np.zeros((N, n))
            c0 = self.bias.copy()
            for i in range(N):
                if mit[i]:
                    Mc[i, x1s(i)] = -cm.k_cp * C1
                    Mc[i, qs.start + i] = cm.k_ci
                    c0[i] += cm.k_cp * cfg.v_ref
            A[psi, psi] += -Qmat
            A[psi, :] += -Qmat @ Mc
            B[psi, one] += -Qmat @ c0
            B[psi, wlay["iL"]] += -ltD
            if self.comm_on:
                for (a, b), cond in comm_edges.items():
                    for (recv, send) in ((a, b), (b, a)):
                        i, j = self.nidx[recv], self.nidx[send]
                        rt = atk_by_link.get(((recv, send), "dgu"))
                        if rt is not None:
                            A[psi.start + i, rt.sl.start + 1] += k_I * cond / rated[j]
            self._reduced_lapM = lapM
            self._reduced_Mc, self._reduced_c0 = Mc, c0

        # estimator banks (run for every unit once comms exist; couplings only
        # across active, uncorrupted links)
        if self.comm_on:
            for node in self.nodes:
                i = self.nidx[node]
                A[x1s(i), x1s(i)] = d.A1
                A[x2s(i), x2s(i)] = d.A2
                if self.full:
                    A[x1s(i), pl(i).start] += B1
                    if self.noisy:
                        B[x1s(i), wlay["rho"].start + 3 * i] += B1
                else:
                    A[x1s(i), psi.start + i] += B1
                    A[x1s(i), :] += np.outer(B1, self._reduced_Mc[i])
                    B[x1s(i), one] += B1 * (cfg.v_ref + self._reduced_c0[i])
                if mit[i]:
                    A[qs.start + i, x1s(i)] += -C1
                    B[qs.start + i, one] += cfg.v_ref
            for (a, b), _cond in comm_edges.items():
                wgt = self.dac_weights[(min(a, b), max(a, b))]
                for (recv, send) in ((a, b), (b, a)):
                    k = self.lidx[(recv, send)]
                    if k in self.corrupted:
                        continue
                    i, j = self.nidx[recv], self.nidx[send]
                    A[x1s(i), x2s(i)] += -gamma * wgt * np.outer(B1, C2)
                    A[x1s(i), x2s(j)] += gamma * wgt * np.outer(B1, C2)
                    A[x2s(i), x1s(i)] += gamma * wgt * np.outer(B2, C1)
                    A[x2s(i), x1s(j)] += -gamma * wgt * np.outer(B2, C1)
                    rt = atk_by_link.get(((recv, send), "dac_x2"))
                    if rt is not None:
                        A[x1s(i), rt.sl] += gamma * wgt * np.outer(B1, C2)
                    rt = atk_by_link.get(((recv, send), "dac_x1"))
                    if rt is not None:
                        A[x2s(i), rt.sl] += -gamma * wgt * np.outer(B2, C1)

        # link observers
        if self.full:
            for k in np.flatnonzero(self.link_active):
                recv, send = self.links[k]
                j = self.nidx[send]
                u = self.uio[send]
                sl = lay[f"uio:{recv}:{send}"]
                A[sl, sl] = u.F
                A[sl, pl(j)] += u.K_hat
                if self.noisy:
                    B[sl, wlay["rho"].start + 3 * j:wlay["rho"].start + 3 * j + 3] += u.K_hat
                rt = atk_by_link.get(((recv, send), "dgu"))
                if rt is not None:
                    A[sl, rt.sl] += u.K_hat
                slv = lay[f"duv:{recv}:{send}"]
                sle = lay[f"due:{recv}:{send}"]
                A[slv, slv] = self.dac_uio_v.F
                A[slv, x1s(j)] += self.dac_uio_v.K_hat
                A[sle, sle] = self.dac_uio_e.F
                A[sle, x2s(j)] += self.dac_uio_e.K_hat
                rt = atk_by_link.get(((recv, send), "dac_x1"))
                if rt is not None:
                    A[slv, rt.sl] += self.dac_uio_v.K_hat
                rt = atk_by_link.get(((recv, send), "dac_x2"))
                if rt is not None:
                    A[sle, rt.sl] += self.dac_uio_e.K_hat

        # injection generators (autonomous, forced by constants/oscillators)
        for rt in self.attacks:
            if not rt.active:
                continue
            A[rt.sl, rt.sl] = rt.A_snap
            B[rt.sl, one] += rt.const_drive
            for drive, wave, osc in rt.sines:
                A[rt.sl, osc.start] += drive
                A[osc.start, osc.start + 1] = wave.freq_rad
                A[osc.start + 1, osc.start] = -wave.freq_rad

        self._finalize_mats(A, B)

    def _finalize_mats(self, A, B):
        # split the step when the segment is too stiff for one RK4 step;
        # the substep count scales with dt, so halving dt preserves order 4
        h = self.dt
        rho_A = float(np.max(np.abs(np.linalg.eigvals(A)))) if self.nx else 0.0
        m = max(1, int(math.ceil(h * rho_A / 2.0)))
        hs = h / m
        eye = np.eye(self.nx)
        hA = hs * A
        W = eye + hA @ (eye / 2 + hA @ (eye / 6 + hA / 24))
        R_sub = eye + hA @ W          # degree-4 truncation: RK4 on a linear ODE
        S_sub = hs * W @ B
        R, S = R_sub, S_sub
        for _ in range(m - 1):
            S = R_sub @ S + S_sub
            R = R_sub @ R
        self.G = np.hstack([R, S])
        self._build_extraction()
        self.EF = np.hstack([self.E, self.F])
        act = self.link_active
        self._any_links = bool(act.any())
        self._act_col = act.astype(float)[:, None]
        self._inact_col = 1.0 - self._act_col
        self._unit_mask = np.array([nd in self.members for nd in self.nodes]
                                   ) & self.comm_on
        self._dirty = False

    def _build_extraction(self):
        n, nw, N = self.nx, self.nw, self.N
        E = np.zeros((self.nrows, n))
        F = np.zeros((self.nrows, nw))
        lay, wlay, rlay, cfg = self.lay, self.wlay, self.rlay, self.cfg
        one = wlay["one"].start
        d = self.dac_params
        C1 = d.C1
        mit = self.bank.mitigating
        cm = cfg.countermeasure
        x1s = lambda i: slice(lay["dacx1"].start + 2 * i, lay["dacx1"].start + 2 * i + 2)

        if self.full:
            pl = lambda i: slice(lay["plant"].start + 3 * i, lay["plant"].start + 3 * i + 3)
            for i in range(N):
                E[rlay["V"].start + i, pl(i).start] = 1.0
                E[rlay["Ipu"].start + i, pl(i).start + 1] = 1.0 / self.params[self.nodes[i]].I_s
                E[rlay["psi"].start + i, lay["psi"].start + i] = 1.0
        else:
            Mc, c0 = self._reduced_Mc, self._reduced_c0
            rated = np.array([self.params[nd].I_s for nd in self.nodes])
            for i in range(N):
                E[rlay["V"].start + i, lay["psi"].start + i] = 1.0
                E[rlay["V"].start + i, :] += Mc[i]
                F[rlay["V"].start + i, one] = cfg.v_ref + c0[i]
                E[rlay["psi"].start + i, lay["psi"].start + i] = 1.0
            V_rows = slice(rlay["V"].start, rlay["V"].start + N)
            E[rlay["Ipu"], :] = np.diag(1 / rated) @ self._reduced_lapM @ E[V_rows, :]
            F[rlay["Ipu"], :] = np.diag(1 / rated) @ self._reduced_lapM @ F[V_rows, :]
            F[rlay["Ipu"], wlay["iL"]] += np.diag(1 / rated)

        for i in range(N):
            if self.comm_on:
                E[rlay["vhat"].start + i, x1s(i)] = C1
            E[rlay["verr"].start + i, :] = -E[rlay["vhat"].start + i, :]
            F[rlay["verr"].start + i, one] = cfg.v_ref
            F[rlay["ctot"].start + i, one] = self.bias[i]
            if mit[i]:
                E[rlay["ctot"].start + i, :] += cm.k_cp * E[rlay["verr"].start + i, :]
                F[rlay["ctot"].start + i, :] += cm.k_cp * F[rlay["verr"].start + i, :]
                E[rlay["ctot"].start + i, lay["compq"].start + i] += cm.k_ci

        act = sorted(self.members) if self.members else list(self.nodes)
        for node in act:
            E[rlay["vavg"].start] += E[rlay["V"].start + self.nidx[node]] / len(act)
            F[rlay["vavg"].start] += F[rlay["V"].start + self.nidx[node]] / len(act)

        if self.full:
            atk_by_link = {}
            for rt in self.attacks:
                if rt.active:
                    atk_by_link.setdefault((rt.spec.link, rt.spec.layer), rt)
            for k in np.flatnonzero(self.link_active):
                recv, send = self.links[k]
                j = self.nidx[send]
                u = self.uio[send]
                rows = slice(rlay["res"].start + 3 * k, rlay["res"].start + 3 * k + 3)
                E[rows, pl(j)] += u.T
                E[rows, lay[f"uio:{recv}:{send}"]] -= np.eye(3)
                if self.noisy:
                    F[rows, wlay["rho"].start + 3 * j:wlay["rho"].start + 3 * j + 3] += u.T
                rt = atk_by_link.get(((recv, send), "dgu"))
                if rt is not None:
                    E[rows, rt.sl] += u.T
                vrows = slice(rlay["resv"].start + 2 * k, rlay["resv"].start + 2 * k + 2)
                erows = slice(rlay["rese"].start + 2 * k, rlay["rese"].start + 2 * k + 2)
                E[vrows, x1s(j)] += self.dac_uio_v.T
                E[vrows, lay[f"duv:{recv}:{send}"]] -= np.eye(2)
                x2sl = slice(lay["dacx2"].start + 2 * j, lay["dacx2"].start + 2 * j + 2)
                E[erows, x2sl] += self.dac_uio_e.T
                E[erows, lay[f"due:{recv}:{send}"]] -= np.eye(2)
                rt = atk_by_link.get(((recv, send), "dac_x1"))
                if rt is not None:
                    E[vrows, rt.sl] += self.dac_uio_v.T
                rt = atk_by_link.get(((recv, send), "dac_x2"))
                if rt is not None:
                    E[erows, rt.sl] += self.dac_uio_e.T
        self.E, self.F = E, F

    # ---- per-step helpers --------------------------------------------------

    def _sample_inputs(self, w):
        if self.noisy:
            draw = self.rng.uniform(-1.0, 1.0, size=(2, self.N, 3))
            w[self.wlay["omega"]] = (draw[0] * self.omega_bounds).ravel()
            w[self.wlay["rho"]] = (draw[1] * self.rho_bounds).ravel()
        w[self.wlay["iL"]] = self.iL
        w[self.wlay["one"]] = 1.0

    def _uio_thresholds(self) -> np.ndarray:
        """Envelopes from the advanced per-link decay factors (zeroed when
        the link is down).  Both DAC observers share one pole set, so one
        decay array covers them."""
        rbar = self._uio_decay * self.th_P + self.th_C
        rbar *= self._act_col
        return rbar

    # ---- main loop -----------------------------------------------------------

    def run(self) -> SimTrace:
        n_saves = self.nsteps // self.stride + 1
        data = np.zeros((n_saves, len(self.columns)))
        x = np.zeros(self.nx)
        w = np.zeros(self.nw)
        xw = np.zeros(self.nx + self.nw)
        y = np.zeros(self.nrows)
        self._sample_inputs(w)

        # events scheduled at t = 0 fire before the first step
        if 0 in self.calendar:
            for kind, payload in self.calendar[0]:
                self._apply_event(kind, payload, x, w, 0.0)
        self._assemble()

        save_row = 0
        xw[:self.nx] = x
        xw[self.nx:] = w
        np.dot(self.EF, xw, out=y)
        self._record(data, save_row, 0.0, y)
        save_row += 1

        calendar = self.calendar
        nx, stride, dt = self.nx, self.stride, self.dt
        for step in range(1, self.nsteps + 1):
            xw[:nx] = x
            xw[nx:] = w
            np.dot(self.G, xw, out=x)
            t = step * dt
            self._sample_inputs(w)

            if step in calendar:
                for kind, payload in calendar[step]:
                    self._apply_event(kind, payload, x, w, t)
                self._dirty = True
                self._assemble()

            xw[:nx] = x
            xw[nx:] = w
            np.dot(self.EF, xw, out=y)
            self._detector_logic(x, y, t)
            if self._dirty:
                self._assemble()

            if step % stride == 0:
                self._record(data, save_row, t, y)
                save_row += 1
                if not np.isfinite(x).all():
                    raise SimulationError(f"non-finite state at t={t:.6f}s; "
                                          f"last good trace row {save_row - 2}")

        meta = {
            "name": self.cfg.name, "seed": self.cfg.seed,
            "fidelity": self.cfg.fidelity, "dt": self.dt,
            "trace_dt": self.cfg.trace_dt, "schema_version": SCHEMA_VERSION,
            "v_ref": self.cfg.v_ref,
            "alarm_threshold": self.cfg.countermeasure.threshold,
            "nodes": list(self.nodes),
            "active_at_end": sorted(self.members),
            "uio_crossings": self.uio_crossings,
            "dac_crossings": self.dac_crossings,
            "max_uio_margin": (None if not self.full else
                               (float(self.max_uio_margin)
                                if np.isfinite(self.max_uio_margin) else None)),
            "max_dac_margin": (None if not self.full else
                               (float(self.max_dac_margin)
                                if np.isfinite(self.max_dac_margin) else None)),
        }
        return SimTrace(columns=self.columns, data=data[:save_row],
                        events=self.events_log, meta=meta)


    def _detector_logic(self, x, y, t):
        rlay = self.rlay

        if self.full and self._any_links:
            np.multiply(self._uio_decay, self._uio_decay_step, out=self._uio_decay)
            np.multiply(self._dac_decay, self._dac_decay_step, out=self._dac_decay)
            res = y[rlay["res"]].reshape(self.L, 3)
            rbar = self._uio_thresholds()
            margin = np.abs(res)
            margin -= rbar
            # inactive links sit exactly at zero margin; exclude them
            margin -= self._inact_col
            mmax = float(margin.max())
            if mmax > self.max_uio_margin:
                self.max_uio_margin = mmax
            if mmax > 0:
                for k in np.flatnonzero((margin > 0).any(axis=1)):
                    self.uio_crossings += 1
                    if k not in self._uio_first:
                        self._uio_first[k] = t
                        self._log(t, "uio_crossing", link=list(self.links[k]),
                                  margin=float(margin[k].max()))

            rv = np.abs(y[rlay["resv"]].reshape(self.L, 2)).max(axis=1)
            re = np.abs(y[rlay["rese"]].reshape(self.L, 2)).max(axis=1)
            dmarg = np.maximum(rv, re)
            dmarg -= self._dac_decay + self._dac_floor
            dmarg -= self._inact_col[:, 0]
            mmax = float(dmarg.max())
            if mmax > self.max_dac_margin:
                self.max_dac_margin = mmax
            if mmax > 0 or self.corrupted:
                bad = set(int(k) for k in np.flatnonzero(dmarg > 0))
                for k in sorted(bad - self.corrupted):
                    self.dac_crossings += 1
                    if k not in self._dac_first:
                        self._dac_first[k] = t
                        self._log(t, "dac_crossing", link=list(self.links[k]),
                                  margin=float(dmarg[k]))
                if bad != self.corrupted:
                    self.corrupted = bad
                    self._dirty = True
            self._last_dacmargin = dmarg
            self._last_rbar = rbar

        verr = y[rlay["verr"]]
        alarmed, recovered = self.bank.step(verr, self._unit_mask, t)
        if alarmed.any() or recovered.any():
            qs = self.lay["compq"]
            for i in np.flatnonzero(alarmed):
                x[qs.start + i] = 0.0
                self._log(t, "alarm", unit=int(self.nodes[i]))
            for i in np.flatnonzero(recovered):
                cm = self.cfg.countermeasure
                self.bias[i] += cm.k_cp * verr[i] + cm.k_ci * x[qs.start + i]
                x[qs.start + i] = 0.0
                self._log(t, "recovered", unit=int(self.nodes[i]),
                          frozen_bias=float(self.bias[i]))
            self._dirty = True

    def _record(self, data, row, t, y):
        rlay, N = self.rlay, self.N
        out = [np.array([t]), y[rlay["V"]], y[rlay["Ipu"]], y[rlay["psi"]],
               y[rlay["vhat"]], y[rlay["verr"]], self.bank.d.copy(),
               y[rlay["ctot"]], self.bank.mitigating.astype(float),
               y[rlay["vavg"]]]
        if self.full:
            out += [y[rlay["res"]], self._last_rbar.ravel(), self._last_dacmargin]
        data[row] = np.concatenate(out)


def run(cfg: ScenarioConfig) -> SimTrace:
    """Simulate one scenario; deterministic for a fixed config and seed."""
    return _Engine(cfg).run()


def twin_run(cfg: ScenarioConfig, attack_specs: list[AttackSpec] | None = None
             ) -> tuple[SimTrace, SimTrace]:
    """Attacked run plus an attack-free twin with the identical noise draw."""
    specs = list(cfg.attacks) if attack_specs is None else list(attack_specs)
    attacked = run(cfg.with_attacks(specs))
    clean = run(cfg.with_attacks([]))
    return attacked, clean
