from fastmcp import FastMCP
from typing import Optional, Dict, Any
import asyncio
import logging
from checkpoint import load_image
from common.errors import ArgumentError, ImageError, ScenarioError
from common.utils import gid_hex, strip_empty_values
from scenario import Simulation, load_scenario, verify_resume_sequence
from telemetry import with_tool_metrics

logger = logging.getLogger(__name__)

simulation_mcp = FastMCP(name="migrsim Simulation Tools MCP Server")


def _run(path: str, seed: Optional[int], migration_enabled: Optional[bool], max_ticks: Optional[int]) -> Dict[str, Any]:
    scenario = load_scenario(path)
    result = Simulation(scenario, seed=seed, max_ticks=max_ticks, migration_enabled=migration_enabled).run()
    response = result.stats()
    response["passed"] = result.passed
    response["trace_sha256"] = result.report.trace.digest()
    return response


@simulation_mcp.tool
@with_tool_metrics()
async def runScenario(
    path: str,
    seed: Optional[int] = None,
    migration_enabled: Optional[bool] = None,
    max_ticks: Optional[int] = None,
) -> Dict[str, Any]:
    """
    Run a migrsim scenario file and return its stats record.

    <usecase>
    Execute a simulated RDMA workload, optionally with live migrations of verbs
    contexts between nodes, and check the scenario's assertions.
    </usecase>

    <instructions>
    - path: scenario TOML file (schema in docs/scenario.md).
    - seed, migration_enabled, max_ticks override the scenario's values.
    The same seed always reproduces the same trace (compare trace_sha256).
    "passed" is false when any scenario assertion failed; the failed ones are
    listed under assertions.failed.
    </instructions>
    """
    try:
        response = await asyncio.to_thread(_run, path, seed, migration_enabled, max_ticks)
    except ScenarioError as e:
        return {
            "error": e.diagnostic(path),
            "guidance": "Fix the scenario key named in the error and run again."
        }
    except Exception as e:
        logger.error(f"Error in runScenario: {e}")
        return {
            "error": str(e),
            "guidance": "The scenario could not be run. Verify the path and the scenario contents."
        }

    if response["passed"]:
        response["guidance"] = "All assertions held."
    else:
        response["guidance"] = (
            "Some assertions failed. Re-run with the same seed and inspect the packet trace "
            "with `migrsim run --trace` to see where the transfer went wrong."
        )
    return strip_empty_values(response)


@simulation_mcp.tool
@with_tool_metrics()
async def verifyResumeSequence(
    first_unacked: int = 5,
    expected_psn: int = 7,
) -> Dict[str, Any]:
    """
    Check the packet sequence of a resume handshake after a migration.

    <usecase>
    A five-packet SEND (PSNs 5 to 9) is migrated after packets 5, 6 and 7 went
    out. Compares the packets that follow the restore with the sequence the
    protocol requires: RESUME, the receiver's ACK, the missing data, the final ACK.
    </usecase>

    <instructions>
    - first_unacked: oldest packet the sender had not seen acknowledged (5 to 8).
    - expected_psn: next PSN the receiver expects (first_unacked to 8).
    </instructions>
    """
    try:
        check = verify_resume_sequence(first_unacked, expected_psn)
    except ArgumentError as e:
        return {
            "error": str(e),
            "guidance": "Choose 5 <= first_unacked <= expected_psn <= 8."
        }

    response = check.to_dict()
    if check.passed:
        response["guidance"] = "The resume handshake produced exactly the expected packets."
    else:
        response["diff"] = check.diff()
        response["guidance"] = "The packet sequence differs; lines marked with ! show where."
    return response


@simulation_mcp.tool
@with_tool_metrics()
async def inspectDumpImage(path: str) -> Dict[str, Any]:
    """
    Summarize the objects stored in a .mgrd dump image.

    <usecase>
    Look inside a checkpoint image: protection domains, memory regions, CQs,
    SRQs and the QPs with their transport state.
    </usecase>
    """
    try:
        image = load_image(path)
    except ImageError as e:
        return {
            "error": str(e),
            "guidance": "Verify the path points at a dump image written by migrsim."
        }
    return {
        "node_gid": gid_hex(image.node_gid),
        "object_count": image.object_count,
        "objects": image.summary(),
        "guidance": f"{image.object_count} objects, listed in restore order.",
    }
