from .telemetry_config import (
    TelemetryConfig,
    NullTelemetry,
    NullMetricInstrument,
    collect_metrics_enabled,
    enable_metrics,
    get_telemetry,
    telemetry
)
from .sim_metrics import (
    with_tool_metrics,
    record_packet,
    record_completion,
    record_migration,
    record_qp_states
)


__all__ = [
    # TelemetryConfig
    "TelemetryConfig",
    "NullTelemetry",
    "NullMetricInstrument",
    "collect_metrics_enabled",
    "enable_metrics",
    "get_telemetry",
    "telemetry",
    # Simulation and tool metrics
    "with_tool_metrics",
    "record_packet",
    "record_completion",
    "record_migration",
    "record_qp_states"
]
