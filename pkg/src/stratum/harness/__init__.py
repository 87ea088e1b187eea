"""Deterministic multi-stratum simulation and the command-line tool."""

from stratum.harness.scenario import RunResult, Scenario, load_scenario, run, run_checked, validate_scenario
from stratum.harness.world import World, make_package, value_of

__all__ = ["RunResult", "Scenario", "World", "load_scenario", "make_package", "run", "run_checked",
           "validate_scenario", "value_of"]
