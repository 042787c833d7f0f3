"""Distributed average-voltage estimator and the parameter-hopping defense.

Every unit runs two coupled second-order filters.  The first tracks the
network-average PCC voltage from the local voltage and neighbor consensus
corrections; the second generates the internal consensus variable.  With
transfer functions

    h(s) = (2 a s + a^2) / (s + a)^2        (first filter)
    g(s) = (s + a) / s^2                    (second filter)

estimation converges to the true average with zero steady-state error for
step- and ramp-class inputs regardless of filter initial states (robust
average consensus).  The scalar a > 0 is the only free constant; the
moving-target defense re-draws a and the per-edge averaging weights on a
fixed period so an eavesdropper's copy of them goes stale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class RacCertificationError(RuntimeError):
    """Analytic and numeric stability checks disagreed (implementation bug)."""


@dataclass
class DacParams:
    """Minimal realizations of h(s), g(s) for a given design constant a."""

    a: float
    gamma: float = 1.0
    A1: np.ndarray = field(init=False)
    B1: np.ndarray = field(init=False)
    C1: np.ndarray = field(init=False)
    A2: np.ndarray = field(init=False)
    B2: np.ndarray = field(init=False)
    C2: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("design constant a must be > 0")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        a = float(self.a)
        self.A1 = np.array([[-2 * a, -a * a], [1.0, 0.0]])
        self.B1 = np.array([[1.0], [0.0]])
        self.C1 = np.array([2 * a, a * a])
        self.A2 = np.array([[0.0, 0.0], [1.0, 0.0]])
        self.B2 = np.array([[1.0], [0.0]])
        self.C2 = np.array([1.0, a])

    def transfer_mismatch(self, s_samples: np.ndarray) -> float:
        """Max deviation of the realizations from h(s), g(s) at the samples."""
        worst = 0.0
        eye = np.eye(2)
        for s in np.atleast_1d(s_samples):
            h_real = (self.C1 @ np.linalg.solve(s * eye - self.A1, self.B1))[0]
            g_real = (self.C2 @ np.linalg.solve(s * eye - self.A2, self.B2))[0]
            a = self.a
            h_ref = (2 * a * s + a * a) / (s + a) ** 2
            g_ref = (s + a) / s ** 2
            worst = max(worst, abs(h_real - h_ref), abs(g_real - g_ref))
        return worst


@dataclass
class DacState:
    """Filter states of one unit's estimator."""

    X1: np.ndarray
    X2: np.ndarray

    @property
    def v_hat(self):
        raise AttributeError("use estimate(params) - output map depends on a")

    def estimate(self, p: DacParams) -> float:
        return float(p.C1 @ self.X1)

    def consensus_var(self, p: DacParams) -> float:
        return float(p.C2 @ self.X2)


def step_dac(state: DacState, v_input: float,
             neighbor_states: dict[int, DacState],
             weights: dict[int, float], p: DacParams, dt: float) -> DacState:
    """One RK4 step of the estimator with neighbor data held over the step.

    neighbor_states must contain only neighbors whose transmitted filter
    states passed integrity validation this step; a flagged neighbor is
    simply absent and its coupling terms drop out.
    """
    eta_nbr = {j: s.consensus_var(p) for j, s in neighbor_states.items()}
    vhat_nbr = {j: s.estimate(p) for j, s in neighbor_states.items()}

    def rates(x1, x2):
        eta_i = float(p.C2 @ x2)
        vhat_i = float(p.C1 @ x1)
        u1 = v_input - p.gamma * sum(w * (eta_i - eta_nbr[j]) for j, w in weights.items()
                                     if j in neighbor_states)
        u2 = p.gamma * sum(w * (vhat_i - vhat_nbr[j]) for j, w in weights.items()
                           if j in neighbor_states)
        return p.A1 @ x1 + p.B1.ravel() * u1, p.A2 @ x2 + p.B2.ravel() * u2

    x1, x2 = state.X1, state.X2
    k1a, k1b = rates(x1, x2)
    k2a, k2b = rates(x1 + 0.5 * dt * k1a, x2 + 0.5 * dt * k1b)
    k3a, k3b = rates(x1 + 0.5 * dt * k2a, x2 + 0.5 * dt * k2b)
    k4a, k4b = rates(x1 + dt * k3a, x2 + dt * k3b)
    return DacState(
        X1=x1 + dt / 6 * (k1a + 2 * k2a + 2 * k3a + k4a),
        X2=x2 + dt / 6 * (k1b + 2 * k2b + 2 * k3b + k4b),
    )


# --- robust-average-consensus certificate -------------------------------

def _cardano_real_root(c2: float, c1: float, c0: float) -> tuple[float, float]:
    """(discriminant, real root) of s^3 + c2 s^2 + c1 s + c0 by radicals."""
    p = c1 - c2 * c2 / 3.0
    q = 2.0 * c2 ** 3 / 27.0 - c2 * c1 / 3.0 + c0
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    if disc <= 0:
        return disc, np.nan
    root = np.cbrt(-q / 2.0 + np.sqrt(disc)) + np.cbrt(-q / 2.0 - np.sqrt(disc))
    return disc, root - c2 / 3.0


@dataclass
class RacEntry:
    lam: float
    numeric_ok: bool
    analytic_ok: bool
    max_real_part: float
    discriminant: float
    real_root: float


@dataclass
class RacCertificate:
    a: float
    gamma: float
    entries: list[RacEntry]
    structure_ok: bool

    @property
    def ok(self) -> bool:
        return self.structure_ok and all(e.numeric_ok and e.analytic_ok
                                         for e in self.entries)


def certify_rac(p: DacParams, laplacian_eigenvalues) -> RacCertificate:
    """Certify zero steady-state tracking error on step/ramp inputs.

    Three conditions are checked: the numerator/denominator mismatch of
    h(s) is divisible by s^2 with h stable; the denominator of g(s) is
    exactly s^2; and for every nonzero Laplacian eigenvalue the closed
    characteristic polynomial (s+a)(s^3 + a s^2 + 2 a g^2 l^2 s + a^2 g^2 l^2)
    has all roots strictly left of the axis.  The cubic is settled twice:
    by a general numeric root finder and by Cardano's discriminant with the
    Vieta bracketing of the real root; any disagreement raises.
    """
    a, g = p.a, p.gamma
    # h(s) numerator - denominator = (2as + a^2) - (s^2 + 2as + a^2) = -s^2:
    # coefficients of that difference below degree 2 must vanish, and the
    # double pole of h sits at -a < 0.  g(s) denominator is s^2 by layout.
    diff = np.array([-1.0, (2 * a) - (2 * a), a * a - a * a])
    structure_ok = bool(abs(diff[1]) < 1e-12 and abs(diff[2]) < 1e-12 and a > 0)

    entries = []
    for lam in np.atleast_1d(np.asarray(laplacian_eigenvalues, dtype=float)):
        if lam <= 0:
            raise ValueError("only the nonzero Laplacian eigenvalues enter")
        gl2 = (g * lam) ** 2
        c2, c1, c0 = a, 2 * a * gl2, a * a * gl2
        roots = np.roots([1.0, c2, c1, c0])
        max_re = float(roots.real.max())
        numeric_ok = max_re < 0
        disc, s1 = _cardano_real_root(c2, c1, c0)
        # one real root + conjugate pair; pair is stable iff -a < s1 < 0
        analytic_ok = bool(disc > 0 and -a < s1 < 0)
        entries.append(RacEntry(lam=float(lam), numeric_ok=numeric_ok,
                                analytic_ok=analytic_ok, max_real_part=max_re,
                                discriminant=float(disc), real_root=float(s1)))
        if numeric_ok != analytic_ok:
            raise RacCertificationError(
                f"analytic/numeric disagreement at lambda={lam}: "
                f"numeric max Re={max_re:.3e}, disc={disc:.3e}, s1={s1:.3e}")
    return RacCertificate(a=a, gamma=g, entries=entries, structure_ok=structure_ok)


# --- moving-target defense ----------------------------------------------

#: validated perturbation ranges: the design constant may grow by up to 10%,
#: edge weights by up to 20x, without tripping the countermeasure indicator.
MTD_A_SPAN = (1.0, 1.1)
MTD_WEIGHT_SPAN = (1.0, 20.0)


def mtd_perturb(base: DacParams, base_weights: dict, rng: np.random.Generator,
                laplacian_eigenvalues=None,
                a_span=MTD_A_SPAN, weight_span=MTD_WEIGHT_SPAN
                ) -> tuple[DacParams, dict]:
    """Draw fresh estimator parameters from the validated ranges.

    Scales are always taken from the *base* values so repeated hops never
    compound.  Tracking is re-certified when eigenvalues are supplied;
    failure rolls back to the base parameters (cannot happen for positive
    draws, guards implementation bugs).
    """
    a_new = base.a * rng.uniform(*a_span)
    weights = {e: w * rng.uniform(*weight_span) for e, w in base_weights.items()}
    fresh = DacParams(a=a_new, gamma=base.gamma)
    if laplacian_eigenvalues is not None:
        try:
            cert = certify_rac(fresh, laplacian_eigenvalues)
        except RacCertificationError:
            return base, dict(base_weights)
        if not cert.ok:
            return base, dict(base_weights)
    return fresh, weights
