"""Per-unit converter model and its control layers.

Each unit is a buck converter behind an RLC filter feeding a constant
current load at its point of common coupling (PCC).  State per unit:

    x = [V, I_t, v]
    V   PCC voltage (V)
    I_t converter output current (A)
    v   integral of the voltage tracking error, dv/dt = V_ref + psi - V

The primary loop closes u = k^T y around the local measurement
y = x + rho.  The secondary input psi is driven by a consensus rule on
per-unit currents exchanged over the communication graph.  Line coupling
enters only the voltage row: dV/dt picks up sum_j (V_j - V_i) / (R_ij C_t).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import place_poles


class PlantError(ValueError):
    """Raised for invalid unit parameters or destabilizing gains."""


#: default closed-loop pole targets for the primary voltage loop (rad/s).
#: Fast enough to stay well inside the secondary-layer bandwidth, slow
#: enough that line coupling does not push the loop towards instability.
DEFAULT_PRIMARY_POLES = (-400.0, -450.0, -500.0)


@dataclass
class DguParams:
    """Electrical and control constants of one unit (SI units)."""

    R_t: float            # filter resistance (ohm)
    L_t: float            # filter inductance (H)
    C_t: float            # shunt capacitance (F)
    I_L: float            # local load current (A)
    I_s: float            # rated current (A), > 0
    v_ref: float = 48.0   # nominal PCC voltage (V), identical across units
    gain: np.ndarray | None = None            # primary gain k, shape (3,)
    rho_bar: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega_bar: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("R_t", "L_t", "C_t", "I_s"):
            if not getattr(self, name) > 0:
                raise PlantError(f"{name} must be > 0")
        self.rho_bar = np.asarray(self.rho_bar, dtype=float)
        self.omega_bar = np.asarray(self.omega_bar, dtype=float)
        if self.rho_bar.shape != (3,) or self.omega_bar.shape != (3,):
            raise PlantError("noise bounds must be 3-vectors")
        if np.any(self.rho_bar < 0) or np.any(self.omega_bar < 0):
            raise PlantError("noise bounds must be non-negative")
        if self.gain is not None:
            self.gain = np.asarray(self.gain, dtype=float).reshape(3)


def isolated_state_matrix(p: DguParams) -> np.ndarray:
    """Open-loop A of an islanded unit (no line coupling, no load term)."""
    return np.array([
        [0.0, 1.0 / p.C_t, 0.0],
        [-1.0 / p.L_t, -p.R_t / p.L_t, 0.0],
        [-1.0, 0.0, 0.0],
    ])


def input_vector(p: DguParams) -> np.ndarray:
    """Converter voltage input channel b (u enters the current row)."""
    return np.array([0.0, 1.0 / p.L_t, 0.0])


def exogenous_matrix(p: DguParams) -> np.ndarray:
    """Columns multiply d = [I_L, v_ref]: load drains the bus, v_ref feeds v."""
    return np.array([
        [-1.0 / p.C_t, 0.0],
        [0.0, 0.0],
        [0.0, 1.0],
    ])


def unknown_input_matrix(p: DguParams) -> np.ndarray:
    """Full-column-rank channel carrying everything a neighbor cannot know.

    Column one scales with the shunt capacitance (loads and line currents
    land on the voltage row), column two is the tracking-integral row.
    """
    return np.array([
        [1.0 / p.C_t, 0.0],
        [0.0, 0.0],
        [0.0, 1.0],
    ])


def synthesize_gain(p: DguParams, poles=DEFAULT_PRIMARY_POLES) -> np.ndarray:
    """Place the islanded closed-loop poles; returns k with u = k^T y.

    Placement uses the islanded model only, so the gain needs no knowledge
    of who the unit is wired to; stability with coupling must be checked
    per topology via assemble_matrices.
    """
    A = isolated_state_matrix(p)
    b = input_vector(p).reshape(3, 1)
    placed = place_poles(A, b, np.sort(np.asarray(poles, dtype=float)))
    k = -placed.gain_matrix.ravel()
    cl = np.linalg.eigvals(A + b @ k[None, :])
    if np.max(cl.real) >= 0:
        raise PlantError("pole placement failed to stabilize the islanded unit")
    return k


def is_hurwitz(M: np.ndarray, margin: float = 0.0) -> bool:
    return bool(np.max(np.linalg.eigvals(M).real) < -margin)


@dataclass
class PlantMatrices:
    """Closed-loop matrices of one unit for a given neighbor set."""

    A: np.ndarray                  # open loop incl. line-coupling diagonal
    A_iso: np.ndarray              # open loop, islanded
    b: np.ndarray                  # (3,)
    g: np.ndarray                  # secondary input channel, (3,)
    exo: np.ndarray                # (3,2), multiplies [I_L, v_ref]
    Ebar: np.ndarray               # (3,2) unknown-input channel
    A_k: np.ndarray                # A + b k^T
    gain: np.ndarray               # (3,)
    coupling: dict[int, np.ndarray]  # neighbor id -> 3x3 cross block


def assemble_matrices(p: DguParams, neighbor_conductance: dict[int, float],
                      gain: np.ndarray | None = None) -> PlantMatrices:
    """Build the unit's matrices for the given set of connected lines.

    neighbor_conductance maps neighbor id -> 1/R_ij (siemens).  Rejects a
    gain that leaves the closed loop non-Hurwitz either islanded or with
    the requested coupling.
    """
    k = np.asarray(gain if gain is not None else
                   (p.gain if p.gain is not None else synthesize_gain(p)),
                   dtype=float).reshape(3)
    A_iso = isolated_state_matrix(p)
    A = A_iso.copy()
    coupling = {}
    for j, cond in neighbor_conductance.items():
        A[0, 0] -= cond / p.C_t
        block = np.zeros((3, 3))
        block[0, 0] = cond / p.C_t
        coupling[j] = block
    b = input_vector(p)
    A_k = A + np.outer(b, k)
    if not is_hurwitz(A_iso + np.outer(b, k)):
        raise PlantError("gain does not stabilize the islanded unit")
    if not is_hurwitz(A_k):
        raise PlantError("gain does not stabilize the coupled unit")
    return PlantMatrices(
        A=A, A_iso=A_iso, b=b, g=np.array([0.0, 0.0, 1.0]),
        exo=exogenous_matrix(p), Ebar=unknown_input_matrix(p),
        A_k=A_k, gain=k, coupling=coupling,
    )


def primary_input(gain: np.ndarray, y: np.ndarray) -> float:
    """Converter voltage command u = k^T y from the measured output."""
    return float(np.dot(gain, y))


def secondary_derivative(own_output: np.ndarray, own_rated: float,
                         received: dict[int, tuple[np.ndarray, float]],
                         weights: dict[int, float], k_I: float) -> float:
    """Consensus drive d(psi)/dt from per-unit current mismatches.

    received maps neighbor id -> (possibly attacked output vector, rated
    current); weights maps neighbor id -> communication edge weight.  Only
    the current entry (index 1) of the outputs participates.
    """
    rate = 0.0
    for j, (y_j, rated_j) in received.items():
        rate -= k_I * weights[j] * (own_output[1] / own_rated - y_j[1] / rated_j)
    return rate


def sample_noise(bounds: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample in the componentwise box [-bounds, bounds]."""
    bounds = np.asarray(bounds, dtype=float)
    return rng.uniform(-1.0, 1.0, size=bounds.shape) * bounds


def steady_state(p: DguParams, neighbor_conductance: dict[int, float],
                 psi: float, neighbor_voltages: dict[int, float],
                 gain: np.ndarray | None = None) -> np.ndarray:
    """Noise-free equilibrium of one unit for frozen neighbors and psi.

    Solves A_k x = -(exo d + g psi + coupling terms); used by tests as an
    independent oracle for the closed-loop operating point.
    """
    m = assemble_matrices(p, neighbor_conductance, gain)
    rhs = m.exo @ np.array([p.I_L, p.v_ref]) + m.g * psi
    for j, cond in neighbor_conductance.items():
        rhs = rhs + m.coupling[j] @ np.array([neighbor_voltages[j], 0.0, 0.0])
    return np.linalg.solve(m.A_k, -rhs)
