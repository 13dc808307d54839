"""Deterministic discrete-event simulation of the cluster platform.

The engine stands in for the real clusters: it executes dispatched jobs
under the linear work model, fires completions, walltime kills, node
failures and recoveries, runs a scheduler plan cycle after every event,
and appends everything to a totally ordered event log whose canonical
JSON Lines form is byte-identical across runs of the same inputs.

The core consumes no randomness; determinism is structural. Progress of
running jobs is accounted in integer work milli-units (work_units x 1000)
credited at speed_factor x workers per virtual millisecond, so a rigid
job finishes after exactly ceil(1000 x work / (speed x nodes)) ms and an
elastic job finishes at the first instant its credited work reaches the
requirement, with an exact ceiling-division solve between rescales.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .model import (
    ClusterSpec,
    Elastic,
    JobRecord,
    JobSpec,
    JobState,
    LifecycleEvent,
    ValidationError,
    transition,
    validate_cluster,
    validate_job,
)
from .scheduler import ClusterState, DispatchDecision, Scheduler


class SimEventKind(str, Enum):
    JOB_SUBMITTED = "JobSubmitted"
    JOB_QUEUED = "JobQueued"
    JOB_STARTED = "JobStarted"
    JOB_FINISHED = "JobFinished"
    JOB_FAILED = "JobFailed"
    JOB_TIMED_OUT = "JobTimedOut"
    JOB_CANCELLED = "JobCancelled"
    NODE_DOWN = "NodeDown"
    NODE_UP = "NodeUp"
    RESCALE_APPLIED = "RescaleApplied"


TERMINAL_EVENT_KINDS = frozenset({
    SimEventKind.JOB_FINISHED,
    SimEventKind.JOB_FAILED,
    SimEventKind.JOB_TIMED_OUT,
    SimEventKind.JOB_CANCELLED,
})


@dataclass(frozen=True)
class SimEvent:
    """One log entry, totally ordered by (t_ms, seq)."""

    t_ms: int
    seq: int
    kind: SimEventKind
    payload: tuple[tuple[str, object], ...]

    def canonical(self) -> str:
        """Fixed serialization: t, seq, kind, then payload keys alphabetical."""
        obj = {"t": self.t_ms, "seq": self.seq, "kind": self.kind.value}
        for key, value in sorted(self.payload):
            obj[key] = value
        return json.dumps(obj, separators=(",", ":"))

    def get(self, key: str):
        for k, v in self.payload:
            if k == key:
                return v
        return None


class EventLog:
    """Append-only event record with a byte-stable canonical form."""

    def __init__(self):
        self.events: list[SimEvent] = []

    def append(self, event: SimEvent):
        self.events.append(event)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def canonical_lines(self) -> list[str]:
        return [e.canonical() for e in self.events]

    def canonical_bytes(self) -> bytes:
        return ("".join(line + "\n" for line in self.canonical_lines())).encode("utf-8")

    def write(self, path):
        with open(path, "wb") as fh:
            fh.write(self.canonical_bytes())

    @classmethod
    def parse_lines(cls, lines) -> "EventLog":
        log = cls()
        for line in lines:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            payload = tuple(sorted(
                (k, tuple(v) if isinstance(v, list) else v)
                for k, v in obj.items() if k not in ("t", "seq", "kind")
            ))
            log.append(SimEvent(t_ms=obj["t"], seq=obj["seq"],
                                kind=SimEventKind(obj["kind"]), payload=payload))
        return log

    @classmethod
    def read(cls, path) -> "EventLog":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse_lines(fh)


@dataclass
class SimConfig:
    """Tunable policy knobs; defaults give the full hybrid-sharing setup."""

    retry_budget: int = 1
    horizon_ms: int = 10_000_000_000
    backfill: bool = True
    hybrid_rigid_on_cloud: bool = False
    first_preference_only: bool = False
    provision_delay_ms: int = 0


class SimulationError(Exception):
    pass


class NonTerminating(SimulationError):
    """Virtual time passed the horizon (or events ran dry) with live jobs."""

    def __init__(self, detail: str):
        super().__init__(detail)


class UnknownNode(SimulationError):
    def __init__(self, cluster_id: str, node_index: int):
        super().__init__(f"no node {node_index} on cluster {cluster_id}")


class PastTime(SimulationError):
    def __init__(self, at_ms: int, now_ms: int):
        super().__init__(f"cannot schedule at {at_ms}; clock already at {now_ms}")


class DuplicateCluster(SimulationError):
    def __init__(self, cluster_id: str):
        super().__init__(f"duplicate cluster_id {cluster_id}")


@dataclass
class _RunState:
    """Engine-internal execution bookkeeping for one job."""

    epoch: int = 0
    retries_left: int = 1
    cluster_id: Optional[str] = None
    rate_per_ms: int = 0          # speed_factor x workers, in milli-units/ms
    workers: int = 0
    required_milli: int = 0
    credited_milli: int = 0
    credit_from_ms: int = 0       # crediting starts here (start + staging)
    kill_at_ms: int = 0
    last_node_indices: tuple[int, ...] = ()
    staging_ms: int = 0


# pending-entry tags
_ARRIVAL = 0
_FINISH = 1
_KILL = 2
_NODE_DOWN = 3
_NODE_UP = 4


class Simulation:
    """Single-threaded deterministic engine over one set of clusters.

    Drive it either in batch (schedule_arrival + run_to_quiescence, as
    run_trace does) or incrementally (submit_now / cancel_now / step, as
    the live service does). Instances share nothing; run as many in
    parallel as you like.
    """

    def __init__(self, clusters: list[ClusterSpec], config: Optional[SimConfig] = None,
                 catalog=None):
        self.config = config or SimConfig()
        self.catalog = catalog
        seen = set()
        for spec in clusters:
            validate_cluster(spec)
            if spec.cluster_id in seen:
                raise DuplicateCluster(spec.cluster_id)
            seen.add(spec.cluster_id)
        states = {s.cluster_id: ClusterState(s) for s in sorted(clusters, key=lambda s: s.cluster_id)}
        self.records: dict[str, JobRecord] = {}
        self.scheduler = Scheduler(
            states, self.records,
            backfill=self.config.backfill,
            hybrid_rigid_on_cloud=self.config.hybrid_rigid_on_cloud,
            first_preference_only=self.config.first_preference_only,
        )
        self.log = EventLog()
        self.clock = 0
        self.last_decision: Optional[DispatchDecision] = None
        self.first_reserved_job: Optional[str] = None
        self._pending: list[tuple[int, int, int, tuple]] = []
        self._tick = 0
        self._seq = 0
        self._run: dict[str, _RunState] = {}
        self._job_idx = 0
        self.hold_intervals: list[tuple[str, int, int, Optional[int]]] = []
        self._known_kinds = {s.kind for s in clusters}

    # -- plumbing ---------------------------------------------------------

    @property
    def now_ms(self) -> int:
        return self.clock

    def clusters(self) -> dict[str, ClusterState]:
        return self.scheduler.clusters

    def _emit(self, kind: SimEventKind, **payload) -> SimEvent:
        event = SimEvent(t_ms=self.clock, seq=self._seq, kind=kind,
                         payload=tuple(sorted(payload.items())))
        self._seq += 1
        self.log.append(event)
        return event

    def _push(self, t_ms: int, tag: int, data: tuple):
        heapq.heappush(self._pending, (t_ms, self._tick, tag, data))
        self._tick += 1

    def new_job_id(self) -> str:
        job_id = f"j{self._job_idx:06d}"
        self._job_idx += 1
        return job_id

    def live_jobs(self) -> list[str]:
        return [j for j, r in self.records.items() if not r.state.terminal]

    # -- submission and control -------------------------------------------

    def schedule_arrival(self, t_ms: int, spec: JobSpec, job_id: Optional[str] = None) -> str:
        if t_ms < self.clock:
            raise PastTime(t_ms, self.clock)
        job_id = job_id or self.new_job_id()
        self._push(t_ms, _ARRIVAL, (job_id, spec))
        return job_id

    def submit_now(self, spec: JobSpec, job_id: Optional[str] = None) -> str:
        """Process a submission synchronously at the current clock."""
        validate_job(spec, self._known_kinds)   # before an id is consumed
        job_id = job_id or self.new_job_id()
        self._handle_arrival(job_id, spec)
        self._plan_cycle()
        return job_id

    def cancel_now(self, job_id: str) -> JobState:
        """Cancel a job at the current clock (AlreadyTerminal if done)."""
        state, _freed = self.scheduler.cancel(job_id, self.clock)
        record = self.records[job_id]
        record.end_ms = self.clock
        record.allocation = None
        rs = self._run.get(job_id)
        if rs is not None:
            rs.epoch += 1
        self._emit(SimEventKind.JOB_CANCELLED, job_id=job_id)
        self._plan_cycle()
        return state

    def inject_node_failure(self, cluster_id: str, node_index: int, at_ms: int, down_ms: int):
        """Schedule a NodeDown/NodeUp pair for one node."""
        cs = self.scheduler.clusters.get(cluster_id)
        if cs is None or not (0 <= node_index < cs.spec.node_count):
            raise UnknownNode(cluster_id, node_index)
        if at_ms < self.clock:
            raise PastTime(at_ms, self.clock)
        if down_ms < 1:
            raise SimulationError("down_ms must be >= 1")
        self._push(at_ms, _NODE_DOWN, (cluster_id, node_index))
        self._push(at_ms + down_ms, _NODE_UP, (cluster_id, node_index))

    # -- vcluster carve-outs (driven by the cloud layer) ------------------

    def hold_nodes(self, cluster_id: str, nodes: tuple[int, ...]):
        """Mark free nodes invisible to the scheduler (vcluster carve-out)."""
        cs = self.scheduler.clusters[cluster_id]
        free = set(cs.free_nodes())
        for n in nodes:
            if n not in free:
                raise SimulationError(f"node {n} on {cluster_id} is not free")
        cs.held.update(nodes)
        for n in sorted(nodes):
            self.hold_intervals.append((cluster_id, n, self.clock, None))

    def release_hold(self, cluster_id: str, nodes: tuple[int, ...]):
        """Return carved-out nodes to scheduler visibility and replan."""
        cs = self.scheduler.clusters[cluster_id]
        cs.held.difference_update(nodes)
        nodeset = set(nodes)
        for i, (cid, n, t0, t1) in enumerate(self.hold_intervals):
            if cid == cluster_id and n in nodeset and t1 is None:
                self.hold_intervals[i] = (cid, n, t0, self.clock)
        self._plan_cycle()

    # -- time -------------------------------------------------------------

    def step(self, until_ms: int) -> list[SimEvent]:
        """Advance the clock to until_ms, processing everything due.

        Returns the events emitted in the window. The clock never moves
        backward: a stale until_ms is a no-op.
        """
        if until_ms < self.clock:
            return []
        mark = len(self.log.events)
        while self._pending and self._pending[0][0] <= until_ms:
            self._process_one()
        self.clock = max(self.clock, until_ms)
        return self.log.events[mark:]

    def run_to_quiescence(self) -> None:
        """Process every pending event; all jobs must end terminal."""
        while self._pending:
            self._process_one()
        live = self.live_jobs()
        if live:
            raise NonTerminating(
                f"no events remain but {len(live)} job(s) still live at t={self.clock}: "
                + ", ".join(sorted(live)[:10])
            )

    def _process_one(self):
        t_ms, _tick, tag, data = heapq.heappop(self._pending)
        if t_ms > self.config.horizon_ms and self.live_jobs():
            raise NonTerminating(
                f"virtual time {t_ms} exceeds horizon {self.config.horizon_ms} "
                f"with live jobs: {', '.join(sorted(self.live_jobs())[:10])}"
            )
        self.clock = max(self.clock, t_ms)
        if tag == _ARRIVAL:
            job_id, spec = data
            self._handle_arrival(job_id, spec)
        elif tag == _FINISH:
            job_id, epoch = data
            if not self._timer_valid(job_id, epoch):
                return
            self._handle_finish(job_id)
        elif tag == _KILL:
            job_id, epoch = data
            if not self._timer_valid(job_id, epoch):
                return
            self._handle_kill(job_id)
        elif tag == _NODE_DOWN:
            self._handle_node_down(*data)
        elif tag == _NODE_UP:
            self._handle_node_up(*data)
        self._plan_cycle()

    def _timer_valid(self, job_id: str, epoch: int) -> bool:
        rs = self._run.get(job_id)
        return rs is not None and rs.epoch == epoch

    # -- event handlers ---------------------------------------------------

    def _handle_arrival(self, job_id: str, spec: JobSpec):
        validate_job(spec, self._known_kinds)
        record = JobRecord(job_id=job_id, spec=spec, submit_ms=self.clock)
        self.records[job_id] = record
        rs = _RunState(retries_left=self.config.retry_budget)
        self._run[job_id] = rs
        self._emit(SimEventKind.JOB_SUBMITTED, job_id=job_id)
        if not self.scheduler.is_satisfiable(record):
            # There is no Queued->Failed edge in the lifecycle table, so a
            # job no acceptable cluster could ever hold is failed here,
            # before it enters the queue.
            record.state = JobState.FAILED
            record.end_ms = self.clock
            self._emit(SimEventKind.JOB_FAILED, job_id=job_id)
            return
        record.state = transition(record.state, LifecycleEvent.VALIDATED)
        self.scheduler.enqueue(record, self.clock)
        self._emit(SimEventKind.JOB_QUEUED, job_id=job_id)

    def _handle_finish(self, job_id: str):
        record = self.records[job_id]
        self._credit(job_id)
        record.state = transition(record.state, LifecycleEvent.FINISHED)
        record.end_ms = self.clock
        self.scheduler.release(job_id)
        record.allocation = None
        self._run[job_id].epoch += 1
        self._emit(SimEventKind.JOB_FINISHED, job_id=job_id)

    def _handle_kill(self, job_id: str):
        record = self.records[job_id]
        self._credit(job_id)
        record.state = transition(record.state, LifecycleEvent.WALLTIME_EXCEEDED)
        record.end_ms = self.clock
        self.scheduler.release(job_id)
        record.allocation = None
        self._run[job_id].epoch += 1
        self._emit(SimEventKind.JOB_TIMED_OUT, job_id=job_id)

    def _handle_node_down(self, cluster_id: str, node_index: int):
        cs = self.scheduler.clusters[cluster_id]
        cs.down.add(node_index)
        self._emit(SimEventKind.NODE_DOWN, cluster_id=cluster_id, node_index=node_index)
        victim = None
        for job_id, alloc in cs.allocations.items():
            if node_index in alloc.node_indices:
                victim = job_id
                break
        if victim is None:
            return
        record = self.records[victim]
        rs = self._run[victim]
        self.scheduler.release(victim)
        record.allocation = None
        rs.epoch += 1
        record.state = transition(record.state, LifecycleEvent.NODE_LOST,
                                  retries_left=rs.retries_left)
        if record.state is JobState.QUEUED:
            rs.retries_left -= 1
            rs.credited_milli = 0   # restart from scratch on the next attempt
            self.scheduler.enqueue(record, self.clock)
            self._emit(SimEventKind.JOB_QUEUED, job_id=victim)
        else:
            record.end_ms = self.clock
            self._emit(SimEventKind.JOB_FAILED, job_id=victim)

    def _handle_node_up(self, cluster_id: str, node_index: int):
        cs = self.scheduler.clusters[cluster_id]
        cs.down.discard(node_index)
        self._emit(SimEventKind.NODE_UP, cluster_id=cluster_id, node_index=node_index)

    # -- the plan cycle ---------------------------------------------------

    def _plan_cycle(self):
        decision = self.scheduler.plan(self.clock)
        self.last_decision = decision
        if decision.reservation is not None and self.first_reserved_job is None:
            self.first_reserved_job = decision.reservation.job_id
        for advisory in decision.advisories:
            record = self.records[advisory.job_id]
            if record.state.terminal:
                continue
            self.scheduler.remove_queued(advisory.job_id)
            record.state = JobState.FAILED
            record.end_ms = self.clock
            self._emit(SimEventKind.JOB_FAILED, job_id=advisory.job_id)
        for job_id, alloc in decision.starts:
            self._start_job(job_id, alloc)
        self._rescale_pass(decision)

    def _start_job(self, job_id: str, alloc):
        record = self.records[job_id]
        rs = self._run[job_id]
        cs = self.scheduler.clusters[alloc.cluster_id]
        record.state = transition(record.state, LifecycleEvent.SCHEDULED)
        record.state = transition(record.state, LifecycleEvent.STARTED)
        record.start_ms = self.clock
        record.allocation = alloc
        rs.cluster_id = alloc.cluster_id
        rs.workers = len(alloc.node_indices)
        rs.last_node_indices = alloc.node_indices
        rs.rate_per_ms = cs.spec.speed_factor * rs.workers
        rs.required_milli = record.spec.work_units * 1000
        rs.credited_milli = 0
        rs.staging_ms = self._staging_delay(record.spec, cs.spec)
        rs.credit_from_ms = self.clock + rs.staging_ms
        rs.kill_at_ms = self.clock + record.spec.walltime_limit_ms
        payload = {
            "cluster_id": alloc.cluster_id,
            "job_id": job_id,
            "node_indices": list(alloc.node_indices),
        }
        if isinstance(record.spec.shape, Elastic):
            record.worker_history.append((self.clock, rs.workers))
            payload["workers"] = rs.workers
        self._emit(SimEventKind.JOB_STARTED, **payload)
        self._schedule_finish(job_id)

    def _staging_delay(self, spec: JobSpec, cluster: ClusterSpec) -> int:
        if self.catalog is None or not spec.dataset_refs:
            return 0
        return sum(self.catalog.staging_delay_ms(name, cluster.cluster_id)
                   for name in spec.dataset_refs)

    def _credit(self, job_id: str):
        """Advance work credit for a running job up to the current clock."""
        rs = self._run[job_id]
        record = self.records[job_id]
        if record.state is not JobState.RUNNING:
            return
        if self.clock > rs.credit_from_ms:
            rs.credited_milli += rs.rate_per_ms * (self.clock - rs.credit_from_ms)
            rs.credit_from_ms = self.clock

    def _schedule_finish(self, job_id: str):
        """(Re)arm the one live timer for a running job: finish or kill."""
        rs = self._run[job_id]
        rs.epoch += 1
        remaining = rs.required_milli - rs.credited_milli
        if remaining <= 0:
            finish_at = max(self.clock, rs.credit_from_ms)
        else:
            finish_at = max(self.clock, rs.credit_from_ms) + -(-remaining // rs.rate_per_ms)
        if finish_at <= rs.kill_at_ms:
            self._push(finish_at, _FINISH, (job_id, rs.epoch))
        else:
            self._push(rs.kill_at_ms, _KILL, (job_id, rs.epoch))

    def _rescale_pass(self, decision: DispatchDecision):
        """Refit every running elastic job to its fair share, shrinks first."""
        reservation = decision.reservation
        for cid in sorted(self.scheduler.clusters):
            cs = self.scheduler.clusters[cid]
            targets = self.scheduler.elastic_targets(cid, reservation)
            changes = [(job_id, t) for job_id, t in targets
                       if t != self._run[job_id].workers]
            if not changes:
                continue
            shrinks = [(j, t) for j, t in changes if t < self._run[j].workers]
            grows = [(j, t) for j, t in changes if t > self._run[j].workers]
            for job_id, target in shrinks + grows:
                rs = self._run[job_id]
                self._credit(job_id)
                new_nodes = self.scheduler.apply_worker_count(job_id, target)
                record = self.records[job_id]
                record.allocation = cs.allocations[job_id]
                rs.workers = len(new_nodes)
                rs.last_node_indices = new_nodes
                rs.rate_per_ms = cs.spec.speed_factor * rs.workers
                record.worker_history.append((self.clock, rs.workers))
                self._emit(SimEventKind.RESCALE_APPLIED, cluster_id=cid,
                           job_id=job_id, node_indices=list(new_nodes),
                           workers=rs.workers)
                self._schedule_finish(job_id)

    # -- introspection ----------------------------------------------------

    def run_info(self, job_id: str) -> _RunState:
        return self._run[job_id]


def run_trace(trace, clusters: list[ClusterSpec], config: Optional[SimConfig] = None,
              catalog=None) -> tuple[EventLog, dict[str, JobRecord]]:
    """Run a submission trace to completion on the given clusters.

    Jobs are validated against the configured kinds (and the catalog, when
    one is supplied) before anything runs; identical inputs produce a
    byte-identical canonical event log.
    """
    known = {s.kind for s in clusters}
    for _t, spec in trace.jobs:
        validate_job(spec, known)
        if catalog is not None and spec.dataset_refs:
            catalog.resolve(spec.dataset_refs)
    sim = Simulation(clusters, config=config, catalog=catalog)
    for t_ms, spec in trace.jobs:
        sim.schedule_arrival(t_ms, spec)
    for fault in trace.faults:
        sim.inject_node_failure(fault.cluster_id, fault.node_index,
                                fault.t_ms, fault.down_duration_ms)
    sim.run_to_quiescence()
    return sim.log, sim.records
