"""Unknown-input observers used as data-integrity detectors.

An observer for a neighbor's n-state system with unknown-input channel
Ebar (n x m, full column rank, n - m = 1) carries matrices (F, K_hat, H, T)
tied together by

    T Ebar = 0,            T = I - H,
    K_hat  = K1 + K2,      F = T A_k - K1,      K2 = F H.

T annihilates the unknown-input range, so the estimation error - and with
it the residual r = y_received - x_hat - evolves autonomously under F plus
noise feedthrough, no matter what loads, couplings or secondary inputs the
monitored unit actually sees.  Because the full state is exchanged (C = I),
K1 is free and the observer poles can be placed exactly.

A residual that leaves its certified envelope means the received data is
inconsistent with *any* realizable unknown input, i.e. it is corrupted.
The envelope is computed from the unknown-but-bounded noise model:

    |r(t)| <= kappa e^{-mu dt} sigma2_bar(0)
              + kappa (1 - e^{-mu dt}) / mu * w_bar + |T| rho_bar

where sigma2_bar(0) = (I + |H|) rho_bar bounds the initial estimation
error, and w_bar = |T| omega_bar + |T b k^T - K_hat| rho_bar bounds the
noise drive.  The middle term is the exponentially-weighted convolution
bound of the noise integral; it saturates at kappa w_bar / mu.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm


class UioSynthesisError(ValueError):
    """Raised when the unknown-input structure is not monitorable."""


@dataclass
class UioParams:
    """Observer matrices plus the decay certificate (kappa, mu)."""

    F: np.ndarray
    K_hat: np.ndarray
    H: np.ndarray
    T: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    kappa: float
    mu: float

    @property
    def n(self) -> int:
        return self.F.shape[0]

    def constraint_residuals(self, A_k: np.ndarray, Ebar: np.ndarray) -> dict[str, float]:
        """Max-abs violation of each defining constraint (all must be ~0)."""
        return {
            "T@Ebar": float(np.abs(self.T @ Ebar).max()),
            "T-(I-H)": float(np.abs(self.T - (np.eye(self.n) - self.H)).max()),
            "Khat-(K1+K2)": float(np.abs(self.K_hat - self.K1 - self.K2).max()),
            "F-(T A_k-K1)": float(np.abs(self.F - (self.T @ A_k - self.K1)).max()),
            "K2-F@H": float(np.abs(self.K2 - self.F @ self.H).max()),
            # algebraic identity the stealth characterization rests on
            "F@T+Khat-T@A_k": float(np.abs(self.F @ self.T + self.K_hat - self.T @ A_k).max()),
        }


def _decay_certificate(F: np.ndarray) -> tuple[float, float]:
    """(kappa, mu) with ||e^{Ft}|| <= kappa e^{-mu t}, validated by sampling."""
    evals, evecs = np.linalg.eig(F)
    if evals.real.max() >= 0:
        raise UioSynthesisError("observer matrix is not Hurwitz")
    mu = 0.95 * abs(evals.real.max())
    kappa = float(np.linalg.cond(evecs))
    ts = np.linspace(0.0, 5.0 / mu, 200)
    for _ in range(40):
        ok = all(np.linalg.norm(expm(F * t), 2) <= kappa * np.exp(-mu * t) * (1 + 1e-12)
                 for t in ts)
        if ok:
            return kappa, mu
        kappa *= 1.1
    raise UioSynthesisError("could not certify an exponential envelope for F")


def synthesize_uio(A_k: np.ndarray, Ebar: np.ndarray, poles,
                   free_vector: np.ndarray | None = None) -> UioParams:
    """Construct observer matrices with eig(F) = poles exactly.

    Ebar must have full column rank with a one-dimensional left null space;
    H is I - tau nhat^T where nhat spans null(Ebar^T) and tau defaults to
    nhat (orthogonal projection).  Any tau with tau^T nhat != 0 is accepted,
    which covers the scalar free parameters of the 3-state case.
    """
    A_k = np.asarray(A_k, dtype=float)
    Ebar = np.asarray(Ebar, dtype=float)
    n, m = Ebar.shape
    if np.linalg.matrix_rank(Ebar) < m:
        raise UioSynthesisError("unknown-input channel is rank deficient; "
                                "the structure is not monitorable")
    if n - m != 1:
        raise UioSynthesisError("expected a one-dimensional checkable subspace")
    # identity output map: rank(C Ebar) = rank(Ebar) holds trivially, kept
    # as an explicit guard for future non-identity output maps
    if np.linalg.matrix_rank(np.eye(n) @ Ebar) != m:
        raise UioSynthesisError("rank(C Ebar) != rank(Ebar)")

    u, s, vt = np.linalg.svd(Ebar)
    nhat = u[:, -1]
    tau = nhat if free_vector is None else np.asarray(free_vector, dtype=float)
    if abs(tau @ nhat) < 1e-12:
        raise UioSynthesisError("free vector makes T vanish on the checkable "
                                "subspace (degenerate observer)")
    T = np.outer(tau, nhat)
    H = np.eye(n) - T
    if np.linalg.matrix_rank(T) + np.linalg.matrix_rank(Ebar) != n:
        raise UioSynthesisError("rank(T) + rank(Ebar) != n")

    poles = np.asarray(poles, dtype=float).reshape(n)
    if poles.real.max() >= 0:
        raise UioSynthesisError("observer poles must lie in the open left half-plane")
    F = np.diag(poles)
    K1 = T @ A_k - F
    K2 = F @ H
    K_hat = K1 + K2
    kappa, mu = _decay_certificate(F)
    params = UioParams(F=F, K_hat=K_hat, H=H, T=T, K1=K1, K2=K2,
                       kappa=kappa, mu=mu)
    worst = max(v for k, v in params.constraint_residuals(A_k, Ebar).items())
    if worst > 1e-12 * max(1.0, abs(A_k).max()):
        raise UioSynthesisError(f"synthesis constraint residual {worst:.2e}")
    return params


def dgu_free_vector(h12: float = 0.0, h22: float = 0.0, h32: float = 0.0) -> np.ndarray:
    """Map the scalar free entries of the 3-state observer onto tau.

    h22 = 1 would zero out T and blind the detector; rejected downstream.
    """
    return np.array([-h12, 1.0 - h22, -h32])


@dataclass
class ThresholdParams:
    """Frozen constants of the residual envelope for one monitored link."""

    sigma2_bar0: np.ndarray   # (I + |H|) rho_bar
    w_bar: np.ndarray         # |T| omega_bar + |T b k^T - K_hat| rho_bar
    direct: np.ndarray        # |T| rho_bar
    kappa: float
    mu: float
    floor: float = 0.0        # numerical slack for noise-free configurations


def threshold_params(uio: UioParams, b: np.ndarray, gain: np.ndarray,
                     rho_bar: np.ndarray, omega_bar: np.ndarray,
                     floor: float = 0.0) -> ThresholdParams:
    drive = uio.T @ np.outer(b, gain) - uio.K_hat
    return ThresholdParams(
        sigma2_bar0=(np.eye(uio.n) + np.abs(uio.H)) @ rho_bar,
        w_bar=np.abs(uio.T) @ omega_bar + np.abs(drive) @ rho_bar,
        direct=np.abs(uio.T) @ rho_bar,
        kappa=uio.kappa, mu=uio.mu, floor=floor,
    )


def threshold_value(th: ThresholdParams, elapsed: float | np.ndarray) -> np.ndarray:
    """Envelope at time `elapsed` since observer initialization."""
    decay = th.kappa * np.exp(-th.mu * np.maximum(elapsed, 0.0))
    accum = th.kappa * (1.0 - np.exp(-th.mu * np.maximum(elapsed, 0.0))) / th.mu
    return decay * th.sigma2_bar0 + accum * th.w_bar + th.direct + th.floor


@dataclass
class ResidualState:
    """Observer internal state and latest residual for one directed link."""

    z: np.ndarray
    x_hat: np.ndarray
    r: np.ndarray
    r_bar: np.ndarray
    t0: float
    t: float


def init_residual_state(uio: UioParams, th: ThresholdParams,
                        y0: np.ndarray, t0: float) -> ResidualState:
    """Start a link observer from z(0) = T y(0), bounding the initial error
    by the measurement-noise bound."""
    z = uio.T @ y0
    x_hat = z + uio.H @ y0
    return ResidualState(z=z, x_hat=x_hat, r=y0 - x_hat,
                         r_bar=threshold_value(th, 0.0), t0=t0, t=t0)


def step_residual(state: ResidualState, y_received: np.ndarray,
                  uio: UioParams, th: ThresholdParams, dt: float) -> ResidualState:
    """Advance the observer one step (received data held over the step)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    drive = uio.K_hat @ y_received

    def rate(z):
        return uio.F @ z + drive

    k1 = rate(state.z)
    k2 = rate(state.z + 0.5 * dt * k1)
    k3 = rate(state.z + 0.5 * dt * k2)
    k4 = rate(state.z + dt * k3)
    z = state.z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    x_hat = z + uio.H @ y_received
    t = state.t + dt
    return ResidualState(z=z, x_hat=x_hat, r=y_received - x_hat,
                         r_bar=threshold_value(th, t - state.t0),
                         t0=state.t0, t=t)


def is_crossed(state: ResidualState) -> bool:
    return bool(np.any(np.abs(state.r) > state.r_bar))


def check_dac_links(residuals: dict, thresholds: dict) -> dict:
    """Per-link verdicts for the estimator-state observers.

    residuals / thresholds map link -> (r_v, r_eta) / (rbar_v, rbar_eta).
    A link is `corrupted` as soon as any component of either residual
    leaves its envelope, otherwise `clean`.
    """
    verdicts = {}
    for link, (r_v, r_eta) in residuals.items():
        rb_v, rb_eta = thresholds[link]
        bad = np.any(np.abs(r_v) > rb_v) or np.any(np.abs(r_eta) > rb_eta)
        verdicts[link] = "corrupted" if bad else "clean"
    return verdicts
