"""Ring-pipeline discrete-event simulator."""
from .engine import SimDeadlock, SimReport, SimulationError, build_report, run, steady_state_throughput
from .trace import EventTrace, replay_check

__all__ = ["SimDeadlock", "SimReport", "SimulationError", "build_report", "run",
           "steady_state_throughput", "EventTrace", "replay_check"]
