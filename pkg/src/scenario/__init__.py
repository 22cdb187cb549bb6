from .schema import (
    ASSERTION_KINDS,
    AssertionSpec,
    ContextSpec,
    MigrationEntry,
    NodeSpec,
    QPSpec,
    Scenario,
    TrafficSpec,
    load_scenario,
    parse_scenario,
)
from .workload import Application, Endpoint, Stream, payload
from .runner import (
    EXIT_ASSERTION,
    EXIT_OK,
    EXIT_USAGE,
    AssertionResult,
    RunResult,
    Simulation,
    run_scenario,
)
from .resume_sequence import ResumeCheck, expected_packets, expected_sequence, verify_resume_sequence

__all__ = [
    "ASSERTION_KINDS",
    "AssertionSpec",
    "ContextSpec",
    "MigrationEntry",
    "NodeSpec",
    "QPSpec",
    "Scenario",
    "TrafficSpec",
    "load_scenario",
    "parse_scenario",
    "Application",
    "Endpoint",
    "Stream",
    "payload",
    "EXIT_ASSERTION",
    "EXIT_OK",
    "EXIT_USAGE",
    "AssertionResult",
    "RunResult",
    "Simulation",
    "run_scenario",
    "ResumeCheck",
    "expected_packets",
    "expected_sequence",
    "verify_resume_sequence",
]
