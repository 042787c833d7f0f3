"""DC microgrid simulation and analysis toolkit.

Simulates a hierarchically controlled DC microgrid with unknown-input
observer detectors on every communication link, synthesizes
residual-invisible data injections against them, predicts the resulting
average-voltage drift in closed form, and runs the distributed
detection-and-mitigation countermeasure built on a consensus estimate of
the average PCC voltage.
"""

__version__ = "0.1.0"

from .scenario import SCHEMA_VERSION, ScenarioConfig, load_attacks, load_scenario
from .simkernel import SimulationError, run, twin_run
from .trace import SimTrace, stealth_report

__all__ = [
    "SCHEMA_VERSION",
    "ScenarioConfig",
    "SimTrace",
    "SimulationError",
    "__version__",
    "load_attacks",
    "load_scenario",
    "run",
    "stealth_report",
    "twin_run",
]
