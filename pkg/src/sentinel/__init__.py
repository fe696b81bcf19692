"""Transaction-level bus policing simulator.

Models per-slave policy engines, a response-channel sanity checker, a
prioritised response engine with anti-tamper actions, a CAN bus with ID
filtering and error-limit checks, and a threat-table compiler that turns
DREAD-scored threats into policy tables.
"""

from .harness import RunReport, run_scenario
from .scenario import Scenario, load_scenario, parse_scenario
from .world import World

__all__ = ["RunReport", "Scenario", "World", "load_scenario", "parse_scenario", "run_scenario"]
__version__ = "0.1.0"
