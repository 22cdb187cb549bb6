# Import tools from each module
from .simulation_tools import (
    simulation_mcp,
    runScenario,
    verifyResumeSequence,
    inspectDumpImage
)

__all__ = [
    "simulation_mcp",
    "runScenario",
    "verifyResumeSequence",
    "inspectDumpImage"
]
