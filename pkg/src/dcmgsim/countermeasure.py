"""Two-phase distributed countermeasure: detect, then compensate.

Each unit watches only its own estimate of the network-average voltage
deviation.  The alarm statistic is a sliding-window integral of its
magnitude: benign events (plug-in/out, load steps) produce a bump that
passes through the window and decays, while a stealthy injection leaves a
persistent or growing deviation that accumulates past any bump a tolerated
daily operation can produce.  On alarm the deviation is fed to a local PI
term added to the secondary input; once the windowed integral falls below
the recovery level the accumulated compensation is frozen in as a constant
bias and the unit re-arms.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class CountermeasureConfig:
    window: float = 0.65        # sliding-window length T (s)
    threshold: float = 0.0325   # alarm level on the windowed integral (V s)
    delta: float = 0.005        # recovery level: window * delta (V)
    k_cp: float = 1.0           # proportional compensation gain
    k_ci: float = 20.0          # integral compensation gain (1/s)
    enabled: bool = True        # False = monitor only, never alarm

    def __post_init__(self):
        if not (self.window > 0 and self.delta > 0):
            raise ValueError("window and delta must be positive")
        if self.enabled and not (self.k_cp > 0 and self.k_ci > 0):
            raise ValueError("compensation gains must be positive")


class IndicatorBank:
    """Sliding trapezoid integral of |input| for every unit, O(1) per step.

    A unit's indicator reads zero until a full window of samples has been
    collected after its activation; activation times differ per unit
    (plug-in restarts the dead time).
    """

    def __init__(self, n_units: int, window: float, dt: float):
        self.n = n_units
        self.dt = dt
        self.w = max(1, int(round(window / dt)))
        self._ring = np.zeros((self.w + 2, n_units))
        self._count = np.zeros(n_units, dtype=np.int64)
        self._sum = np.zeros(n_units)
        self._head = 0
        self._vals = np.zeros(n_units)

    def reset_unit(self, i: int):
        self._count[i] = 0
        self._sum[i] = 0.0
        self._ring[:, i] = 0.0

    def push(self, samples: np.ndarray, active: np.ndarray) -> np.ndarray:
        """Add one sample per unit; inactive units stay in their dead time.

        A unit's ring column is reset on (re)activation, so slots written
        while it was inactive never reach its integral.
        """
        size = self._ring.shape[0]
        mag = np.abs(samples)
        prev = self._ring[(self._head - 1) % size]
        tail = self._ring[(self._head - self.w) % size]
        tail_prev = self._ring[(self._head - self.w - 1) % size]
        cnt = self._count
        gain = (mag + prev) * (active & (cnt >= 1))
        loss = (tail + tail_prev) * (active & (cnt >= self.w + 1))
        self._sum += 0.5 * self.dt * (gain - loss)
        np.maximum(self._sum, 0.0, out=self._sum)  # round-off drift guard
        self._ring[self._head] = mag
        cnt += active
        self._head = (self._head + 1) % size
        np.multiply(self._sum, cnt - 1 >= self.w, out=self._vals)
        return self._vals

    def values(self) -> np.ndarray:
        return self._vals


def update_indicator(bank: IndicatorBank, unit: int, sample: float) -> float:
    """Single-unit convenience wrapper over the vectorized bank."""
    active = np.zeros(bank.n, dtype=bool)
    active[unit] = True
    samples = np.zeros(bank.n)
    samples[unit] = sample
    return float(bank.push(samples, active)[unit])


@dataclass
class PhaseEvent:
    t: float
    unit: int
    transition: str   # "alarm" | "recovered"


class CountermeasureBank:
    """Per-unit detection/mitigation phase machines (the distributed loop).

    step() is one pass of the per-unit algorithm over all units: update the
    indicator from the unit's own estimated deviation, trip the alarm when
    it exceeds the calibrated level, and report recovery when the windowed
    integral drops under window * delta.  The caller owns the PI state and
    applies the returned transitions to it.
    """

    def __init__(self, cfg: CountermeasureConfig, n_units: int, dt: float):
        self.cfg = cfg
        self.indicator = IndicatorBank(n_units, cfg.window, dt)
        self.mitigating = np.zeros(n_units, dtype=bool)
        self.events: list[PhaseEvent] = []
        self.d = np.zeros(n_units)
        self._none = np.zeros(n_units, dtype=bool)

    def reset_unit(self, i: int):
        self.indicator.reset_unit(i)
        self.mitigating[i] = False

    def step(self, verr: np.ndarray, active: np.ndarray, t: float
             ) -> tuple[np.ndarray, np.ndarray]:
        """Returns (alarmed, recovered) boolean masks for this step."""
        self.d = self.indicator.push(verr, active)
        if not self.cfg.enabled:
            return self._none, self._none
        trip = active & ~self.mitigating & (self.d > self.cfg.threshold)
        done = active & self.mitigating & (self.d < self.cfg.window * self.cfg.delta)
        if trip.any() or done.any():
            for i in np.flatnonzero(trip):
                self.events.append(PhaseEvent(t, int(i), "alarm"))
            for i in np.flatnonzero(done):
                self.events.append(PhaseEvent(t, int(i), "recovered"))
            self.mitigating |= trip
            self.mitigating &= ~done
            return trip, done
        return self._none, self._none


run_algorithm1 = CountermeasureBank.step


@dataclass
class CalibrationResult:
    per_op: dict[str, float]     # op label -> max indicator over the run
    noise_floor: float           # max indicator with no op at all
    threshold: float             # margin * max(per-op maxima, floor)
    margin: float
    excluded: list[str] = field(default_factory=list)


def calibrate_threshold(scenario, margin: float = 1.1, seed: int | None = None
                        ) -> CalibrationResult:
    """Set the alarm level from attack-free runs of each tolerated operation.

    Each daily operation in the scenario is simulated on its own (on top of
    the initialization sequence) and the maximum indicator it produces is
    recorded; the threshold is the margin times the largest of these.  An
    operation whose run fails (e.g. it would split the grid) is excluded
    with a warning.  With no operations the threshold rests on the noise
    floor alone.
    """
    from . import simkernel  # local import; the kernel depends on this module

    per_op: dict[str, float] = {}
    excluded: list[str] = []

    base = scenario.without_operations()
    if seed is not None:
        base = base.with_seed(seed)
    trace = simkernel.run(base.monitor_only())
    floor = float(np.max(trace.indicators))

    for op_scenario, label in scenario.single_operation_variants():
        if seed is not None:
            op_scenario = op_scenario.with_seed(seed)
        try:
            trace = simkernel.run(op_scenario.monitor_only())
        except Exception as exc:  # disconnection or numerical abort
            warnings.warn(f"operation {label} excluded from calibration: {exc}")
            excluded.append(label)
            continue
        per_op[label] = float(np.max(trace.indicators))

    peak = max(per_op.values(), default=floor)
    return CalibrationResult(per_op=per_op, noise_floor=floor,
                             threshold=margin * max(peak, floor),
                             margin=margin, excluded=excluded)
