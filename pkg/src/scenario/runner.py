"""Builds a simulation from a Scenario, runs it and checks its assertions."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from common.errors import ArgumentError, ScenarioError
from common.utils import strip_empty_values
from migrator import MigrationReport, MigrationSpec, MigrationStatus, Migrator, Transfer
from netsim import NetConfig, Network, SimReport
from telemetry import record_qp_states
from transport import TransportConfig
from verbs import (
    Access,
    Device,
    DeviceConfig,
    NodeAddress,
    Partner,
    QPCaps,
    QPState,
    RetryConfig,
    VerbsContext,
    WCStatus,
)
from .schema import AssertionSpec, ContextSpec, QPSpec, Scenario
from .workload import Application, Endpoint, payload

logger = logging.getLogger(__name__)

# virtual addresses handed to scenario MRs start here, 4 KiB aligned
BASE_VA = 0x10_0000
PAGE = 4096

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_USAGE = 2


def _align(value: int) -> int:
    return (value + PAGE - 1) // PAGE * PAGE


@dataclass
class AssertionResult:
    kind: str
    passed: bool
    detail: str = ""
    line: Optional[int] = None

    def describe(self) -> str:
        where = f" (line {self.line})" if self.line is not None else ""
        status = "ok" if self.passed else "FAILED"
        return f"{self.kind}{where}: {status}{': ' + self.detail if self.detail else ''}"


@dataclass
class RunResult:
    seed: int
    report: SimReport
    migrations: List[MigrationReport]
    assertions: List[AssertionResult] = field(default_factory=list)
    streams: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.passed else EXIT_ASSERTION

    def stats(self) -> Dict[str, Any]:
        r = self.report
        return strip_empty_values(
            {
                "seed": self.seed,
                "final_tick": r.final_tick,
                "timed_out": r.timed_out,
                "packets": {
                    "sent": r.sent,
                    "delivered": r.delivered,
                    "dropped": r.dropped,
                    "duplicated": r.duplicated,
                    "unroutable": r.unroutable,
                    "by_opcode": dict(sorted(r.opcodes.items())),
                },
                "completions": dict(sorted(r.completions.items())),
                "qp_states": dict(sorted(r.qp_states.items())),
                "streams": self.streams,
                "migrations": [m.to_dict() for m in self.migrations],
                "assertions": {
                    "passed": sum(a.passed for a in self.assertions),
                    "failed": [a.describe() for a in self.assertions if not a.passed],
                },
            }
        )

    def write_stats(self, path: str) -> None:
        """Append this run's record as one JSON line."""
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(self.stats(), sort_keys=True) + "\n")


class Simulation:
    def __init__(
        self,
        scenario: Scenario,
        seed: Optional[int] = None,
        max_ticks: Optional[int] = None,
        migration_enabled: Optional[bool] = None,
    ):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.max_ticks = scenario.max_ticks if max_ticks is None else max_ticks
        enabled = scenario.migration_enabled if migration_enabled is None else migration_enabled
        try:
            net_config = NetConfig(seed=self.seed, max_ticks=self.max_ticks, **scenario.net)
            transport = TransportConfig(migration_enabled=enabled, **scenario.transport)
        except ArgumentError as e:
            raise ScenarioError(str(e)) from e

        self.network = Network(net_config, transport)
        self.migrator = Migrator(self.network)
        self.devices: Dict[str, Device] = {}
        for i, node in enumerate(scenario.nodes):
            dev = Device(node.name, NodeAddress.from_guid(node.guid), DeviceConfig.partitioned(i, key_seed=self.seed))
            self.network.attach(dev)
            self.devices[node.name] = dev

        self.endpoints: List[Endpoint] = []
        self._qps: Dict[str, Tuple[VerbsContext, Any]] = {}
        for ctx_spec in scenario.contexts:
            self._build_context(ctx_spec)
        self._connect()

        self.app = Application(self.network, self.endpoints, self.seed)
        seen = set()
        for t in scenario.traffic:
            if t.qp in seen:
                raise ScenarioError("at most one traffic entry per QP", key=f"traffic.{t.qp}")
            seen.add(t.qp)
            self.app.add_stream(t)
        self.app.prime()
        self.network.tick_hooks.append(self.app.on_tick)

        self.timeline: List[str] = []
        self._last_states: Dict[Tuple[str, int], str] = {}
        self._schedule_migrations()

    # ── construction ─────────────────────────────────────────────────

    def _slot_size(self, ctx_spec: ContextSpec, qp: QPSpec) -> int:
        names = {q.name for q in ctx_spec.qps} if ctx_spec.srq_depth else {qp.name}
        specs = self.scenario.qp_specs()
        names |= {specs[n][1].partner for n in names}
        sizes = [t.msg_max for t in self.scenario.traffic if t.qp in names]
        return max(sizes + [1])

    def _build_context(self, spec: ContextSpec) -> None:
        dev = self.devices[spec.node]
        ctx = dev.open_context(spec.id)
        pd = ctx.alloc_pd()
        cq = ctx.create_cq(spec.cq_depth)
        srq = ctx.create_srq(pd, spec.srq_depth) if spec.srq_depth else None
        va = BASE_VA

        for size in spec.mrs:
            mr = ctx.reg_mr(pd, va, size, Access.LOCAL_WRITE | Access.REMOTE_WRITE)
            mr.write(va, payload(mr.mrn, size))
            va = _align(va + size)

        for qp_spec in spec.qps:
            slot = self._slot_size(spec, qp_spec)
            caps = QPCaps(max_send_wr=qp_spec.max_send_wr, max_recv_wr=qp_spec.max_recv_wr)
            qp = ctx.create_qp(pd, cq, cq, srq=srq, caps=caps)
            send_mr = ctx.reg_mr(pd, va, slot * qp_spec.max_send_wr, Access.LOCAL_WRITE)
            va = _align(va + send_mr.length)
            recv_mr = ctx.reg_mr(pd, va, slot * qp_spec.max_recv_wr * 2, Access.LOCAL_WRITE | Access.REMOTE_WRITE)
            va = _align(va + recv_mr.length)
            self._qps[qp_spec.name] = (ctx, qp)
            self.endpoints.append(
                Endpoint(
                    index=len(self.endpoints),
                    name=qp_spec.name,
                    spec=qp_spec,
                    ctx_id=spec.id,
                    qpn=qp.qpn,
                    cq=cq.handle,
                    srq=srq.handle if srq is not None else None,
                    slot_size=slot,
                    send_mrn=send_mr.mrn,
                    send_base=send_mr.base,
                    send_lkey=send_mr.lkey,
                    recv_mrn=recv_mr.mrn,
                    recv_base=recv_mr.base,
                    recv_lkey=recv_mr.lkey,
                    recv_rkey=recv_mr.rkey,
                )
            )

    def _connect(self) -> None:
        specs = self.scenario.qp_specs()
        for name, (ctx, qp) in self._qps.items():
            ctx.modify_qp(qp, QPState.INIT)
        for name, (ctx, qp) in self._qps.items():
            qp_spec = specs[name][1]
            peer_ctx, peer = self._qps[qp_spec.partner]
            peer_spec = specs[qp_spec.partner][1]
            ctx.modify_qp(
                qp,
                QPState.RTR,
                partner=Partner(peer_ctx.node, peer.qpn),
                mtu=qp_spec.mtu,
                expected_psn=peer_spec.start_psn,
            )
        for name, (ctx, qp) in self._qps.items():
            qp_spec = specs[name][1]
            ctx.modify_qp(
                qp,
                QPState.RTS,
                next_psn=qp_spec.start_psn,
                retry=RetryConfig(timeout_ticks=qp_spec.timeout_ticks, max_retries=qp_spec.max_retries),
            )

    def _schedule_migrations(self) -> None:
        where = {c.id: c.node for c in self.scenario.contexts}
        ordered = sorted(enumerate(self.scenario.migrations), key=lambda item: (item[1].at, item[0]))
        for i, entry in ordered:
            src = self.devices[where[entry.context]]
            dst = self.devices[entry.to]
            try:
                spec = MigrationSpec(
                    ctx_id=entry.context,
                    src=src.address,
                    dst=dst.address,
                    trigger_tick=entry.at,
                    transfer=Transfer(entry.transfer),
                )
            except ArgumentError as e:
                raise ScenarioError(str(e), key=f"migrations[{i}]") from e
            self.migrator.schedule(spec)
            where[entry.context] = entry.to

    # ── running ──────────────────────────────────────────────────────

    def record_timeline(self) -> None:
        """Keep a `tick node qpn state` line for every QP state change."""
        self.network.tick_hooks.append(self._sample_states)

    def _sample_states(self, tick: int) -> None:
        for dev, qp in self.network.iter_qps():
            key = (dev.name, qp.qpn)
            state = qp.state.name
            if self._last_states.get(key) != state:
                self._last_states[key] = state
                self.timeline.append(f"{tick} {dev.name} 0x{qp.qpn:06x} {state}")

    def _finished(self, network: Network) -> bool:
        return self.app.finished() and all(r.done for r in self.migrator.reports)

    def run(self) -> RunResult:
        logger.info(
            f"running {self.scenario.path or 'scenario'} with seed {self.seed}, "
            f"{len(self.scenario.traffic)} stream(s), {len(self.scenario.migrations)} migration(s)"
        )
        report = self.network.run_until(self._finished, max_ticks=self.max_ticks)
        migrations = self.migrator.finalize()
        record_qp_states(report.qp_states)
        result = RunResult(
            seed=self.seed,
            report=report,
            migrations=migrations,
            streams=[s.summary() for s in self.app.streams],
        )
        result.assertions = [self._check(a, report) for a in self.scenario.assertions]
        for a in result.assertions:
            if not a.passed:
                logger.warning(a.describe())
        return result

    def _check(self, assertion: AssertionSpec, report: SimReport) -> AssertionResult:
        result = AssertionResult(assertion.kind, True, line=assertion.line)
        match assertion.kind:
            case "all_delivered":
                problems = self.app.undelivered()
                if report.timed_out:
                    problems.insert(0, f"timed out at tick {report.final_tick}")
                if problems:
                    result.passed = False
                    result.detail = "; ".join(problems)
            case "no_errors":
                errors = [
                    rec for rec in self.network.completion_log if rec.wc.status != WCStatus.SUCCESS
                ]
                if errors:
                    first = errors[0]
                    result.passed = False
                    result.detail = (
                        f"{len(errors)} error completion(s), first {first.wc.status.name} "
                        f"on {first.node} QP 0x{first.wc.qpn:06x} at tick {first.tick}"
                    )
            case "trace_contains":
                if not report.trace.select(assertion.where, limit=1):
                    result.passed = False
                    result.detail = f"no trace record matches {assertion.where}"
            case "trace_absent":
                hits = report.trace.select(assertion.where, limit=1)
                if hits:
                    result.passed = False
                    result.detail = f"unexpected record: {hits[0].format()}"
            case "migrations_completed":
                bad = [m for m in self.migrator.reports if m.status != MigrationStatus.COMPLETED]
                if bad:
                    result.passed = False
                    result.detail = "; ".join(
                        f"context {m.spec.ctx_id}: {m.status.value}{' (' + m.error + ')' if m.error else ''}"
                        for m in bad
                    )
        return result


def run_scenario(
    scenario: Scenario,
    seed: Optional[int] = None,
    max_ticks: Optional[int] = None,
    migration_enabled: Optional[bool] = None,
) -> RunResult:
    return Simulation(scenario, seed=seed, max_ticks=max_ticks, migration_enabled=migration_enabled).run()
