import functools
import json
import time
import logging
from typing import Dict, Any, Callable, Mapping, Optional
from fastmcp.exceptions import ToolError
from opentelemetry import trace
from opentelemetry.trace import StatusCode
from .telemetry_config import get_telemetry

logger = logging.getLogger(__name__)

# Tracer instance; a no-op tracer when no TracerProvider is configured
tracer = trace.get_tracer("migrsim")


def record_packet(direction: str, opcode: str) -> None:
    counter = get_telemetry().packets_counter
    if counter is not None:
        counter.labels(direction=direction, opcode=opcode).inc()


def record_completion(status: str) -> None:
    counter = get_telemetry().completions_counter
    if counter is not None:
        counter.labels(status=status).inc()


def record_migration(report) -> None:
    """Count a finished migration and observe its phase durations."""
    try:
        telemetry = get_telemetry()
        if telemetry.migrations_counter is None:
            return
        telemetry.migrations_counter.labels(outcome=report.status.value).inc()
        if report.status.value != "completed":
            return
        for phase in ("checkpoint", "transfer", "restore"):
            telemetry.migration_phase_histogram.labels(phase=phase).observe(getattr(report, f"{phase}_ticks"))
    except Exception as e:
        logger.error(f"Failed to record migration metrics: {e}")


def record_qp_states(states: Mapping[str, int]) -> None:
    gauge = get_telemetry().qp_state_gauge
    if gauge is None:
        return
    for state, count in states.items():
        gauge.labels(state=state).set(count)


def with_tool_metrics(tool_name: Optional[str] = None):
    """
    Decorator that tracks metrics and creates trace spans for tool calls.

    Metrics (via prometheus_client): call counter by status, duration histogram.
    Traces (via OpenTelemetry): one span per call with tool_name and status.

    A result dict carrying an "error" key is raised as ToolError so the
    client sees the call as failed.

    Args:
        tool_name: Override the tool name (defaults to function name)
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        async def wrapper(*args, **kwargs):
            actual_tool_name = tool_name or func.__name__
            start_time = time.time()

            with tracer.start_as_current_span(actual_tool_name) as span:
                span.set_attribute("tool_name", actual_tool_name)

                try:
                    result = await func(*args, **kwargs)
                    status = "success" if _is_successful_response(result) else "failure"
                    span.set_attribute("status", status)
                    _record_tool_completion_metrics(actual_tool_name, start_time, status)

                except Exception as e:
                    span.set_attribute("status", "error")
                    span.record_exception(e)
                    span.set_status(StatusCode.ERROR, str(e))

                    _record_tool_completion_metrics(actual_tool_name, start_time, "error")
                    logger.error(f"Tool {actual_tool_name} failed with exception: {e}")
                    raise
                else:
                    if isinstance(result, dict) and "error" in result:
                        raise ToolError(json.dumps(result, indent=2))
                    return result

        return wrapper
    return decorator


def _is_successful_response(response: Dict[str, Any]) -> bool:
    """Determine if a tool response indicates success"""
    if not isinstance(response, dict):
        return False

    if "error" in response:
        return False

    if response.get("passed") is False:
        return False

    return True


def _record_tool_completion_metrics(tool_name: str, start_time: float, status: str):
    """Record metrics when a tool completes"""
    try:
        duration = time.time() - start_time
        telemetry = get_telemetry()

        if telemetry.tool_calls_counter is None:
            return

        telemetry.tool_calls_counter.labels(tool_name=tool_name, status=status).inc()
        telemetry.tool_duration_histogram.labels(tool_name=tool_name).observe(duration)

        logger.info(f"Tool '{tool_name}' completed - Status: {status}, Duration: {duration:.3f}s")

    except Exception as e:
        logger.error(f"Failed to record tool metrics: {e}")
