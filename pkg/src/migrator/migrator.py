"""Live migration of one verbs context between simulated nodes.

A migration runs as scheduler events: at the trigger tick the source context
is dumped (its QPs stop answering with anything but NAK_STOPPED); the image
then travels to the destination, paced one chunk per tick on the network's
bulk channel (or arrives on the next tick when transferred out of band); on
arrival the context is restored, every sending QP is refilled and sends a
RESUME, and the source objects are destroyed.
"""

from __future__ import annotations

import logging
from typing import Dict, Iterable, List, Optional, Tuple

from opentelemetry import trace

from checkpoint import DumpImage, RecordType, dump_context, refill, restore_context
from common.errors import ArgumentError, MigrsimError, StateError
from netsim import Network
from telemetry import record_migration
from verbs import Device, NodeAddress, Partner, WCOpcode
from .migration import MigrationReport, MigrationSpec, MigrationStatus, Transfer

logger = logging.getLogger(__name__)

tracer = trace.get_tracer("migrsim")


class Migrator:
    def __init__(self, network: Network):
        self.network = network
        self.reports: List[MigrationReport] = []
        # (gid the QP used to live at, qpn) -> gid it lives at now
        self.locations: Dict[Tuple[bytes, int], bytes] = {}
        self._torn_down: set = set()

    # ── scheduling ───────────────────────────────────────────────────

    def schedule(self, spec: MigrationSpec) -> MigrationReport:
        """Queue `spec` at its trigger tick; the returned report fills in as
        the simulation runs."""
        self.network.device(spec.src)
        self.network.device(spec.dst)
        report = MigrationReport(spec)
        self.reports.append(report)
        self.network.schedule_migration(spec.trigger_tick, lambda now: self._checkpoint(report, now))
        return report

    def migrate(self, spec: MigrationSpec, max_ticks: Optional[int] = None) -> MigrationReport:
        """Schedule `spec` and run the network until the migration finishes."""
        report = self.schedule(spec)
        self.network.run_until(lambda net: report.done, max_ticks=max_ticks)
        if not report.done:
            report.status = MigrationStatus.FAILED
            report.error = "tick budget exhausted before the migration finished"
            logger.error(f"migration of context {spec.ctx_id}: {report.error}")
        return report

    def resolve(self, gid: bytes, qpn: int) -> bytes:
        """Current GID of the QP last known at (gid, qpn)."""
        return self.locations.get((gid, qpn), gid)

    def _record_move(self, qpn: int, src: bytes, dst: bytes) -> None:
        self.locations.pop((dst, qpn), None)
        for key, where in self.locations.items():
            if key[1] == qpn and where == src:
                self.locations[key] = dst
        self.locations[(src, qpn)] = dst

    # ── phases ───────────────────────────────────────────────────────

    def _fail(self, report: MigrationReport, now: int, error: Exception) -> None:
        report.status = MigrationStatus.FAILED
        report.error = str(error)
        report.finished_at = now
        logger.error(f"migration of context {report.spec.ctx_id} failed at tick {now}: {error}")
        record_migration(report)

    def _checkpoint(self, report: MigrationReport, now: int) -> None:
        spec = report.spec
        report.status = MigrationStatus.RUNNING
        report.started_at = now
        with tracer.start_as_current_span("migration.checkpoint") as span:
            span.set_attribute("ctx_id", spec.ctx_id)
            try:
                if not self.network.transport.migration_enabled:
                    raise StateError("migration support is disabled")
                src = self.network.device(spec.src)
                ctx = src.contexts.get(spec.ctx_id)
                if ctx is None:
                    raise ArgumentError(f"{src.name} has no context {spec.ctx_id}")
                image = dump_context(ctx)
                data = image.encode()
            except MigrsimError as e:
                self._fail(report, now, e)
                return
            span.set_attribute("image_bytes", len(data))

        report.checkpoint_ticks = 1
        report.image_bytes = len(data)
        qp_records = image.of_type(RecordType.QP)
        report.qp_count = len(qp_records)
        report.partners = [
            (rec.partner_gid, rec.partner_qpn) for rec in qp_records if rec.partner_gid is not None
        ]
        logger.info(
            f"migration of context {spec.ctx_id}: checkpointed {image.object_count} objects "
            f"({len(data)} bytes) on {src.name} at tick {now}"
        )

        with tracer.start_as_current_span("migration.transfer") as span:
            span.set_attribute("transfer", spec.transfer.value)
            if spec.transfer == Transfer.OUT_OF_BAND:
                self.network.schedule_wakeup(now + 1, lambda t: self._restore(report, data, t))
                return
            size = self.network.config.bulk_chunk_bytes
            chunks = [data[i:i + size] for i in range(0, len(data), size)]
            received: List[bytes] = []

            def _on_chunk(chunk: bytes, t: int) -> None:
                received.append(chunk)
                if len(received) == len(chunks):
                    self._restore(report, b"".join(received), t)

            tag = self.network.new_transfer_tag(_on_chunk)
            arrival = self.network.send_bulk(spec.src, spec.dst, chunks, tag)
            span.set_attribute("chunks", len(chunks))
            span.set_attribute("arrival_tick", arrival)

    def _restore(self, report: MigrationReport, data: bytes, now: int) -> None:
        spec = report.spec
        report.transfer_ticks = now - (report.started_at + report.checkpoint_ticks)
        with tracer.start_as_current_span("migration.restore") as span:
            span.set_attribute("ctx_id", spec.ctx_id)
            try:
                image = DumpImage.decode(data)
                dst = self.network.device(spec.dst)
                ctx, pending = restore_context(dst, spec.ctx_id, image)
            except MigrsimError as e:
                # the stopped source stays in place; teardown() cleans it up
                self._fail(report, now, e)
                return

            # QPs of this context that talk to each other must resolve to the destination
            for rec in image.of_type(RecordType.QP):
                self._record_move(rec.qpn, spec.src.gid, spec.dst.gid)

            for qp in ctx.qps.values():
                if qp.partner is None:
                    continue
                moved = self.resolve(qp.partner.address.gid, qp.partner.qpn)
                if moved != qp.partner.address.gid:
                    logger.info(f"QP {qp.qpn:#x}: partner moved to {moved.hex()}")
                    qp.partner = Partner(NodeAddress.from_gid(moved), qp.partner.qpn)
            for qp, rec in pending:
                refill(qp, rec, now)
            report.resume_count = len(pending)

            src = self.network.device(spec.src)
            old = src.contexts.get(spec.ctx_id)
            if old is not None:
                old.close()

        report.restore_ticks = 1
        report.finished_at = now + 1
        report.status = MigrationStatus.COMPLETED
        logger.info(
            f"migration of context {spec.ctx_id} completed: checkpoint={report.checkpoint_ticks} "
            f"transfer={report.transfer_ticks} restore={report.restore_ticks} ticks, "
            f"{report.resume_count} RESUME(s) sent"
        )
        record_migration(report)

    # ── statistics and cleanup ───────────────────────────────────────

    def finalize(self) -> List[MigrationReport]:
        """Fill in the partner-observed latency of every finished migration."""
        for report in self.reports:
            if report.started_at is None:
                continue
            partners = set(report.partners)
            worst = 0
            for rec in self.network.completion_log:
                wc = rec.wc
                if wc.opcode == WCOpcode.RECV:
                    continue
                key = (rec.gid, wc.qpn)
                if key not in partners:
                    continue
                if wc.completed_at < report.started_at:
                    continue
                if report.finished_at is not None and wc.posted_at > report.finished_at:
                    continue
                worst = max(worst, wc.completed_at - wc.posted_at)
            report.max_partner_latency_ticks = worst
        return self.reports

    def teardown(self, ctx_id: int, nodes: Iterable[Device]) -> None:
        """Destroy every object of context `ctx_id` on `nodes`. Partners are
        not told; their sends run into the retry limit."""
        found = False
        for device in nodes:
            ctx = device.contexts.get(ctx_id)
            if ctx is not None:
                ctx.close()
                found = True
        if found:
            self._torn_down.add(ctx_id)
            logger.info(f"tore down context {ctx_id}")
        elif ctx_id not in self._torn_down:
            raise ArgumentError(f"unknown context {ctx_id}")
