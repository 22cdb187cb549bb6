import os
import logging
from typing import Optional
from dotenv import load_dotenv

from opentelemetry import trace
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor
from opentelemetry.exporter.otlp.proto.http.trace_exporter import OTLPSpanExporter
from opentelemetry.sdk.resources import Resource
from prometheus_client import Counter, Histogram, Gauge, CollectorRegistry, generate_latest, write_to_textfile, CONTENT_TYPE_LATEST

load_dotenv()

logger = logging.getLogger(__name__)

# migration phases last a handful to a few hundred thousand ticks
PHASE_TICK_BUCKETS = (1, 2, 5, 10, 50, 100, 500, 1_000, 5_000, 10_000, 50_000, 100_000, 500_000)


class NullMetricInstrument:
    """No-op metric instrument that supports the prometheus_client .labels() API."""
    def labels(self, *args, **kwargs):
        return self

    def inc(self, amount=1):
        pass

    def set(self, value):
        pass

    def observe(self, amount):
        pass


class NullTelemetry:
    """Null object implementation of TelemetryConfig that does nothing"""
    def __init__(self):
        self.packets_counter = NullMetricInstrument()
        self.completions_counter = NullMetricInstrument()
        self.migrations_counter = NullMetricInstrument()
        self.migration_phase_histogram = NullMetricInstrument()
        self.qp_state_gauge = NullMetricInstrument()
        self.tool_calls_counter = NullMetricInstrument()
        self.tool_duration_histogram = NullMetricInstrument()
        self._initialized = True

    def initialize(self):
        pass

    def get_tracer(self, name: str):
        return None

    def generate_metrics(self) -> tuple[bytes, str]:
        return b"", "text/plain"

    def write_metrics(self, path: str) -> bool:
        return False


class TelemetryConfig:
    def __init__(self):
        self.otlp_traces_endpoint = os.getenv("OTEL_EXPORTER_OTLP_ENDPOINT")
        self.otel_enabled = os.getenv("MIGRSIM_OTEL_ENABLED", "false").lower() == "true"

        self.tracer_provider: Optional[TracerProvider] = None
        # private registry, so repeated runs in one process start from zero
        self._registry: Optional[CollectorRegistry] = None
        self._initialized = False

        # Metric instruments (set in _setup_metrics_instruments)
        self.packets_counter = None
        self.completions_counter = None
        self.migrations_counter = None
        self.migration_phase_histogram = None
        self.qp_state_gauge = None
        self.tool_calls_counter = None
        self.tool_duration_histogram = None

    def setup_tracing(self):
        """Configure OpenTelemetry tracing for migration phase spans"""
        if not self.otel_enabled or not self.otlp_traces_endpoint:
            logger.info("OTEL tracing disabled (MIGRSIM_OTEL_ENABLED not set or no endpoint configured)")
            return

        resource = Resource.create({
            "service.name": "migrsim",
            "service.namespace": "migrsim",
        })

        self.tracer_provider = TracerProvider(resource=resource)

        otlp_exporter = OTLPSpanExporter(endpoint=self.otlp_traces_endpoint)
        span_processor = BatchSpanProcessor(otlp_exporter)
        self.tracer_provider.add_span_processor(span_processor)
        trace.set_tracer_provider(self.tracer_provider)

        logger.info(f"OTLP tracing configured: {self.otlp_traces_endpoint}")

    def setup_prometheus(self):
        self._registry = CollectorRegistry()
        self._setup_metrics_instruments()
        logger.info("Prometheus metric instruments initialized")

    def _setup_metrics_instruments(self):
        """Initialize prometheus_client metric instruments."""

        # -- Counters --
        self.packets_counter = Counter(
            "migrsim_packets_total",
            "Packets put on or taken off the simulated wire",
            ["direction", "opcode"],
            registry=self._registry,
        )

        self.completions_counter = Counter(
            "migrsim_work_completions_total",
            "Work completions generated, by status",
            ["status"],
            registry=self._registry,
        )

        self.migrations_counter = Counter(
            "migrsim_migrations_total",
            "Finished migrations, by outcome",
            ["outcome"],
            registry=self._registry,
        )

        self.tool_calls_counter = Counter(
            "migrsim_tool_calls_total",
            "Total number of tool calls",
            ["tool_name", "status"],
            registry=self._registry,
        )

        # -- Histograms --
        self.migration_phase_histogram = Histogram(
            "migrsim_migration_phase_ticks",
            "Simulated duration of each migration phase",
            ["phase"],
            buckets=PHASE_TICK_BUCKETS,
            registry=self._registry,
        )

        self.tool_duration_histogram = Histogram(
            "migrsim_tool_duration_seconds",
            "Wall-clock duration of tool calls",
            ["tool_name"],
            registry=self._registry,
        )

        # -- Gauges --
        self.qp_state_gauge = Gauge(
            "migrsim_qp_state",
            "QPs per state at the end of the last run",
            ["state"],
            registry=self._registry,
        )

    def generate_metrics(self) -> tuple[bytes, str]:
        """Generate Prometheus metrics output."""
        if self._registry is None:
            return b"", "text/plain"
        return generate_latest(self._registry), CONTENT_TYPE_LATEST

    def write_metrics(self, path: str) -> bool:
        """Write the registry to `path` in the Prometheus text format."""
        if self._registry is None:
            return False
        write_to_textfile(path, self._registry)
        return True

    def initialize(self):
        """Initialize all telemetry components"""
        if self._initialized:
            logger.info("Telemetry already initialized, skipping...")
            return
        self.setup_tracing()
        self.setup_prometheus()
        self._initialized = True
        logger.info("Telemetry initialization complete")

    def get_tracer(self, name: str):
        """Get a tracer instance"""
        return trace.get_tracer(name)


def collect_metrics_enabled() -> bool:
    return os.getenv("COLLECT_METRICS", "false").lower() == "true"


# Global telemetry instance
telemetry = TelemetryConfig() if collect_metrics_enabled() else NullTelemetry()


def get_telemetry():
    return telemetry


def enable_metrics() -> TelemetryConfig:
    """Switch to real instruments (e.g. for `migrsim run --metrics`) even when
    COLLECT_METRICS is off."""
    global telemetry
    if not isinstance(telemetry, TelemetryConfig):
        telemetry = TelemetryConfig()
    telemetry.initialize()
    return telemetry
