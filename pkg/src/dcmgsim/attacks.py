"""Construction of residual-invisible injections and their predicted impact.

A man-in-the-middle on a communication link adds phi(t) to the transmitted
output.  The observer residual stays exactly zero if and only if phi starts
from zero at the attack onset and evolves through the monitored unit's own
closed-loop dynamics driven by a fabricated unknown input:

    d(phi)/dt = A_k phi + Ebar dfake(t),   phi(T_a) = 0.

Everything the detector could check is confined to the one-dimensional
subspace T annihilates nothing of; forcing inside range(Ebar) is
indistinguishable from a legitimate load/coupling/secondary signal.

For a constant dfake the injected signal settles at -A_k^{-1} Ebar dfake
and the network-average secondary input acquires a ramp with

    rate   = -(k_I a_c / (N I_s_j)) k^T A_k^{-1} Ebar dfake
    offset = -(k_I a_c / (N I_s_j)) k^T A_k^{-2} Ebar dfake

(k = e_2 selects the per-unit current row).  Multi-link injections whose
rates cancel leave a constant, attacker-chosen average-voltage deviation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .netgraph import SpectralQ
from .plant import PlantMatrices

K_ROW = np.array([0.0, 1.0, 0.0])  # selects the current entry of an output


# --- fake unknown-input waveforms ----------------------------------------

@dataclass(frozen=True)
class ConstantInput:
    value: tuple

    def __call__(self, t: float) -> np.ndarray:
        return np.asarray(self.value, dtype=float)

    @property
    def m(self) -> int:
        return len(self.value)


@dataclass(frozen=True)
class SineInput:
    amp: float
    freq_rad: float
    component: int = 0
    m_total: int = 2

    def __call__(self, t: float) -> np.ndarray:
        out = np.zeros(self.m_total)
        out[self.component] = self.amp * np.sin(self.freq_rad * t)
        return out

    @property
    def m(self) -> int:
        return self.m_total


@dataclass(frozen=True)
class SumInput:
    parts: tuple

    def __call__(self, t: float) -> np.ndarray:
        return sum((p(t) for p in self.parts), start=np.zeros(self.m))

    @property
    def m(self) -> int:
        return self.parts[0].m


@dataclass
class AttackSpec:
    """One injected link: where, when, and with what fabricated input.

    layer selects the attacked channel: the unit-output exchange ("dgu") or
    one of the two estimator-state exchanges ("dac_x1", "dac_x2").
    knowledge_time pins the attacker's parameter snapshot (None = onset
    time); relevant when the defense has re-drawn parameters since.
    init_offset / extra_forcing deliberately break the two stealth
    conditions and exist for detectability experiments; both zero means
    the injection is residual-invisible by construction.
    """

    link: tuple[int, int]          # (receiver i, sender j)
    t_start: float
    fake_input: object             # waveform, callable t -> R^m
    layer: str = "dgu"
    knowledge_time: float | None = None
    init_offset: np.ndarray | None = None
    extra_forcing: np.ndarray | None = None
    label: str = ""

    def __post_init__(self):
        if self.layer not in ("dgu", "dac_x1", "dac_x2"):
            raise ValueError(f"unknown attack layer {self.layer!r}")
        if self.init_offset is not None:
            self.init_offset = np.asarray(self.init_offset, dtype=float)
        if self.extra_forcing is not None:
            self.extra_forcing = np.asarray(self.extra_forcing, dtype=float)

    @property
    def is_zts(self) -> bool:
        zero = lambda v: v is None or not np.any(v)
        return zero(self.init_offset) and zero(self.extra_forcing)


class AttackGenerator:
    """Integrates the injection signal from the attacker's model snapshot."""

    def __init__(self, spec: AttackSpec, A_k: np.ndarray, Ebar: np.ndarray):
        self.spec = spec
        self.A_k = np.asarray(A_k, dtype=float)
        self.Ebar = np.asarray(Ebar, dtype=float)
        n = self.A_k.shape[0]
        self.phi = np.zeros(n)
        if spec.init_offset is not None:
            self.phi = self.phi + spec.init_offset
        self.t = spec.t_start

    def _rate(self, phi: np.ndarray, t: float) -> np.ndarray:
        r = self.A_k @ phi + self.Ebar @ self.spec.fake_input(t)
        if self.spec.extra_forcing is not None:
            r = r + self.spec.extra_forcing
        return r

    def step(self, dt: float) -> np.ndarray:
        k1 = self._rate(self.phi, self.t)
        k2 = self._rate(self.phi + 0.5 * dt * k1, self.t + 0.5 * dt)
        k3 = self._rate(self.phi + 0.5 * dt * k2, self.t + 0.5 * dt)
        k4 = self._rate(self.phi + dt * k3, self.t + dt)
        self.phi = self.phi + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        self.t += dt
        return self.phi


def generate_zts(spec: AttackSpec, plant: PlantMatrices, t: float,
                 phi_state: np.ndarray | None, dt: float) -> np.ndarray:
    """Advance the injection one step; returns the signal added to the link.

    Zero before onset.  phi_state None (re)starts the generator at onset.
    """
    if t < spec.t_start:
        return np.zeros(plant.A_k.shape[0])
    if phi_state is None:
        phi_state = np.zeros(plant.A_k.shape[0])
        if spec.init_offset is not None:
            phi_state = phi_state + spec.init_offset
    gen = AttackGenerator(spec, plant.A_k, plant.Ebar)
    gen.phi, gen.t = phi_state, t
    return gen.step(dt)


def closed_form_attack_vector(A_k: np.ndarray, Ebar: np.ndarray,
                              dfake: np.ndarray, elapsed: float) -> np.ndarray:
    """phi(T_a + elapsed) for a constant fabricated input, by matrix exponential.

    phi = (e^{A_k dt} - I) A_k^{-1} Ebar dfake; independent oracle for the
    integrated generator.
    """
    base = np.linalg.solve(A_k, Ebar @ np.asarray(dfake, dtype=float))
    return expm(A_k * elapsed) @ base - base


# --- closed-form impact --------------------------------------------------

@dataclass
class ImpactPrediction:
    """Predicted steady effect on the network-average PCC voltage."""

    apvd_slope: float              # V/s, ramp rate of the average deviation
    apvd_offset: float             # V, constant part
    classification: str            # "ramp" | "constant" | "none"
    post_mitigation_apvd: float | None = None
    cooperative_residual: float | None = None
    current_sharing_violated: bool | None = None


@dataclass
class LinkGeometry:
    """Per-link constants entering the impact formulas."""

    plant: PlantMatrices           # monitored (sending) unit's matrices
    comm_weight: float             # a_c of the attacked edge
    rated_sender: float            # I_s of the sending unit
    label: tuple[int, int] = (0, 0)


def _gain_factor(geom: LinkGeometry, k_I: float, n_units: int) -> float:
    return k_I * geom.comm_weight / (n_units * geom.rated_sender)


def _first_moment(geom: LinkGeometry, dfake: np.ndarray) -> float:
    v = np.linalg.solve(geom.plant.A_k, geom.plant.Ebar @ dfake)
    return float(K_ROW @ v)


def _second_moment(geom: LinkGeometry, dfake: np.ndarray) -> float:
    v = np.linalg.solve(geom.plant.A_k, geom.plant.Ebar @ dfake)
    return float(K_ROW @ np.linalg.solve(geom.plant.A_k, v))


def _classify(slope: float, offset: float, tol: float = 1e-9) -> str:
    if abs(slope) > tol:
        return "ramp"
    if abs(offset) > tol:
        return "constant"
    return "none"


def predict_single_impact(dfake: np.ndarray, geom: LinkGeometry,
                          k_I: float, n_units: int) -> ImpactPrediction:
    """Steady average-voltage deviation of one constant-input injection."""
    dfake = np.asarray(dfake, dtype=float)
    g = _gain_factor(geom, k_I, n_units)
    slope = -g * _first_moment(geom, dfake)
    offset = -g * _second_moment(geom, dfake)
    return ImpactPrediction(apvd_slope=slope, apvd_offset=offset,
                            classification=_classify(slope, offset))


def cooperative_residual(dfakes: list[np.ndarray], geoms: list[LinkGeometry],
                         k_I: float) -> float:
    """Value of the rate-cancellation condition (zero = no ramp)."""
    return sum(k_I * g.comm_weight / g.rated_sender * _first_moment(g, d)
               for d, g in zip(dfakes, geoms))


def design_cooperative(fixed: list[tuple[LinkGeometry, np.ndarray]],
                       free: LinkGeometry, k_I: float,
                       free_component: int = 0) -> np.ndarray:
    """Solve the free link's constant input so the ramp terms cancel.

    Only the chosen component of the free input is used (the other stays
    zero), which makes the solution unique.  Raises if no link can carry
    the balancing term.
    """
    if len(fixed) < 1:
        raise ValueError("cooperative design needs at least two links "
                         "(one fixed, one free)")
    acc = sum(k_I * g.comm_weight / g.rated_sender * _first_moment(g, d)
              for g, d in fixed)
    for comp in (free_component, 1 - free_component):
        unit = np.zeros(2)
        unit[comp] = 1.0
        coeff = k_I * free.comm_weight / free.rated_sender * _first_moment(free, unit)
        if abs(coeff) > 1e-12:
            out = np.zeros(2)
            out[comp] = -acc / coeff
            return out
    raise ValueError("free link cannot influence the ramp term "
                     "(all first-moment coefficients vanish)")


def predict_cooperative_impact(dfakes: list[np.ndarray],
                               geoms: list[LinkGeometry], k_I: float,
                               n_units: int, tol: float = 1e-8
                               ) -> ImpactPrediction:
    """Joint steady impact of several constant-input injections.

    When the rate-cancellation condition fails beyond tol the prediction
    falls back to plain superposition of the single-link results and says
    so in the returned slope.
    """
    if not dfakes:
        return ImpactPrediction(0.0, 0.0, "none", cooperative_residual=0.0,
                                current_sharing_violated=False)
    resid = cooperative_residual(dfakes, geoms, k_I)
    slope = -resid / n_units
    offset = sum(-_gain_factor(g, k_I, n_units) * _second_moment(g, d)
                 for d, g in zip(dfakes, geoms))
    if abs(resid) > tol:
        warnings.warn("rate terms do not cancel; reporting superposed "
                      f"single-link impact (residual {resid:.3e})")
    # per-unit current-sharing condition: the vector of rate terms must be
    # identically zero, not just its average
    sharing_terms = np.array([k_I * g.comm_weight / g.rated_sender
                              * _first_moment(g, d)
                              for d, g in zip(dfakes, geoms)])
    violated = bool(np.any(np.abs(sharing_terms) > tol))
    return ImpactPrediction(apvd_slope=slope, apvd_offset=offset,
                            classification=_classify(slope, offset),
                            cooperative_residual=resid,
                            current_sharing_violated=violated)


def predict_mitigated_apvd(dfakes: list[np.ndarray], geoms: list[LinkGeometry],
                           k_I: float, n_units: int, k_ci: float,
                           v_ref: float) -> float:
    """Steady network-average voltage once the integral compensator is active.

    Equals v_ref exactly when the rate terms cancel; otherwise the integral
    gain divides the residual ramp rate.
    """
    if not k_ci > 0:
        raise ValueError("k_ci must be > 0")
    acc = sum(_gain_factor(g, k_I, n_units) * _first_moment(g, d)
              for d, g in zip(dfakes, geoms))
    return v_ref - acc / k_ci


# --- full impact trajectory (used by verification tests) -----------------

def _conv_scalar(beta: complex, lam: float, delta: np.ndarray) -> np.ndarray:
    """int_0^delta e^{beta s} e^{-lam (delta - s)} ds with a resonance-safe path."""
    if abs(beta + lam) > 1e-6:
        return (np.exp(beta * delta) - np.exp(-lam * delta)) / (beta + lam)
    from scipy.integrate import quad
    out = np.empty(len(delta), dtype=complex)
    for idx, d in enumerate(delta):
        re, _ = quad(lambda s: np.real(np.exp(beta * s) * np.exp(-lam * (d - s))), 0, d)
        im, _ = quad(lambda s: np.imag(np.exp(beta * s) * np.exp(-lam * (d - s))), 0, d)
        out[idx] = re + 1j * im
    return out


def impact_trajectory(dfake: np.ndarray, geom: LinkGeometry, receiver_index: int,
                      spectral: SpectralQ, k_I: float, times: np.ndarray,
                      t_start: float) -> np.ndarray:
    """Per-unit trajectory of the injected secondary-input component.

    Evaluates the modal expansion of the forced consensus response: the
    forcing c(t) l_i is decomposed over the consensus eigenbasis and each
    (plant mode, consensus mode) pair contributes a convolution term.
    Returns an array (len(times), N); rows before onset are zero.
    """
    n_units = spectral.Q.shape[0]
    times = np.asarray(times, dtype=float)
    delta = np.maximum(times - t_start, 0.0)
    g = k_I * geom.comm_weight / geom.rated_sender

    phi_inf = -np.linalg.solve(geom.plant.A_k, geom.plant.Ebar @ dfake)
    l_vec = np.zeros(n_units)
    l_vec[receiver_index] = 1.0
    deltas_r = spectral.decompose(l_vec)          # l_i = sum_r delta_r q_r
    lam = spectral.eigenvalues

    out = np.zeros((len(times), n_units))
    # constant part of the forcing: g k^T phi_inf
    c_const = g * float(K_ROW @ phi_inf)
    for r in range(n_units):
        if lam[r] < 1e-12:
            shape = delta
        else:
            shape = (1.0 - np.exp(-lam[r] * delta)) / lam[r]
        out += np.outer(c_const * deltas_r[r] * shape, spectral.eigenvectors[:, r])

    # decaying part: g k^T e^{A_k delta} phi_check, expanded over plant modes
    betas, vecs = np.linalg.eig(geom.plant.A_k)
    etas = np.linalg.solve(vecs, -phi_inf)        # phi_check = A^{-1} Ebar dfake
    for m_idx in range(len(betas)):
        a_m2 = (K_ROW @ vecs)[m_idx]
        coef = g * etas[m_idx] * a_m2
        if abs(coef) < 1e-16:
            continue
        for r in range(n_units):
            term = coef * deltas_r[r] * _conv_scalar(betas[m_idx], lam[r], delta)
            out += np.outer(term, spectral.eigenvectors[:, r]).real
    mask = times >= t_start
    out[~mask] = 0.0
    return out
