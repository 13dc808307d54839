"""Resource scheduling: queue, placement, backfilling, elastic fair share.

The scheduler matches queued jobs to typed pools respecting each job's
ordered kind preferences. Policy is FIFO by (priority, submission order)
with a single head-of-queue reservation and conservative backfilling:
a later job may start out of order only if its walltime-bounded run
provably cannot delay the reserved start of the queue head.

Every tie-break is lexicographic (cluster_id, node index, job_id) so that
identical inputs always produce identical decisions.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Optional

from .model import (
    Allocation,
    ClusterSpec,
    Elastic,
    JobRecord,
    JobState,
    LifecycleEvent,
    ResourceKind,
    Rigid,
    transition,
)


class SchedulerError(Exception):
    pass


class DuplicateJob(SchedulerError):
    def __init__(self, job_id: str):
        self.job_id = job_id
        super().__init__(f"job {job_id} is already queued or live")


class NoAllocation(SchedulerError):
    def __init__(self, job_id: str):
        self.job_id = job_id
        super().__init__(f"job {job_id} holds no live allocation")


class AlreadyTerminal(SchedulerError):
    def __init__(self, job_id: str, state: JobState):
        self.job_id = job_id
        self.state = state
        super().__init__(f"job {job_id} is already terminal ({state.value})")


class NotElastic(SchedulerError):
    def __init__(self, job_id: str):
        super().__init__(f"job {job_id} is not elastic")


class NotRunning(SchedulerError):
    def __init__(self, job_id: str):
        super().__init__(f"job {job_id} is not running")


class UnknownJob(SchedulerError):
    def __init__(self, job_id: str):
        self.job_id = job_id
        super().__init__(f"unknown job {job_id}")


@dataclass(frozen=True)
class QueueEntry:
    """One queued job. Queue order is (-priority, submit_seq, job_id)."""

    job_id: str
    priority: int
    submit_seq: int
    remaining_kind_preferences: tuple[ResourceKind, ...] = ()

    @property
    def sort_key(self) -> tuple:
        return (-self.priority, self.submit_seq, self.job_id)


@dataclass(frozen=True)
class Reservation:
    """Earliest guaranteed start for the blocked head of the queue."""

    job_id: str
    cluster_id: str
    node_indices: tuple[int, ...]
    start_ms: int
    expected_end_ms: int


@dataclass(frozen=True)
class Unsatisfiable:
    """Advisory: no acceptable cluster owns enough nodes for this job."""

    job_id: str
    needed: int


@dataclass(frozen=True)
class DispatchDecision:
    """Output of one plan cycle: jobs to start now, plus head reservation."""

    starts: tuple[tuple[str, Allocation], ...]
    reservation: Optional[Reservation]
    advisories: tuple[Unsatisfiable, ...] = ()


class ClusterState:
    """Node bookkeeping for one cluster.

    A node is free iff it is not covered by a live allocation, not down,
    and not held by a virtual cluster.
    """

    def __init__(self, spec: ClusterSpec):
        self.spec = spec
        self.allocations: dict[str, Allocation] = {}
        self.alloc_deadline: dict[str, int] = {}
        self.down: set[int] = set()
        self.held: set[int] = set()
        self._occupied: set[int] = set()

    def free_nodes(self) -> list[int]:
        blocked = self._occupied | self.down | self.held
        return [i for i in range(self.spec.node_count) if i not in blocked]

    def free_count(self) -> int:
        return self.spec.node_count - len(self._occupied | self.down | self.held)

    def busy_count(self) -> int:
        return len(self._occupied)

    def allocate(self, job_id: str, nodes: tuple[int, ...], start_ms: int, deadline_ms: int) -> Allocation:
        alloc = Allocation(job_id=job_id, cluster_id=self.spec.cluster_id,
                           node_indices=nodes, start_ms=start_ms)
        self.allocations[job_id] = alloc
        self.alloc_deadline[job_id] = deadline_ms
        self._occupied.update(alloc.node_indices)
        return alloc

    def release(self, job_id: str) -> tuple[int, ...]:
        alloc = self.allocations.pop(job_id, None)
        if alloc is None:
            raise NoAllocation(job_id)
        del self.alloc_deadline[job_id]
        self._occupied.difference_update(alloc.node_indices)
        return alloc.node_indices

    def resize(self, job_id: str, nodes: tuple[int, ...]) -> Allocation:
        old = self.allocations[job_id]
        self._occupied.difference_update(old.node_indices)
        new = Allocation(job_id=job_id, cluster_id=self.spec.cluster_id,
                         node_indices=nodes, start_ms=old.start_ms)
        self.allocations[job_id] = new
        self._occupied.update(nodes)
        return new

    def deadline_by_node(self) -> dict[int, int]:
        """Map busy node index -> expected end (start + walltime) of its job."""
        out: dict[int, int] = {}
        for job_id, alloc in self.allocations.items():
            end = self.alloc_deadline[job_id]
            for n in alloc.node_indices:
                out[n] = end
        return out


class Scheduler:
    """Single-writer scheduler over a set of cluster states.

    Owns the queue and all placement decisions; the simulation engine (or
    the live service) drives it through one serialized command stream and
    turns its decisions into lifecycle events.
    """

    def __init__(self, clusters: dict[str, ClusterState], records: dict[str, JobRecord],
                 *, backfill: bool = True, hybrid_rigid_on_cloud: bool = False,
                 first_preference_only: bool = False):
        self.clusters = clusters
        self.records = records
        self.backfill = backfill
        self.hybrid_rigid_on_cloud = hybrid_rigid_on_cloud
        self.first_preference_only = first_preference_only
        self._queue_keys: list[tuple] = []
        self._queue_entries: dict[str, QueueEntry] = {}
        self._submit_seq = 0
        self._seq_of_job: dict[str, int] = {}
        # per-job facts that never change while an instance lives; computed
        # once at enqueue so plan cycles stay O(queue), not O(queue x prefs)
        self._needed: dict[str, int] = {}
        self._wall: dict[str, int] = {}
        self._accept: dict[str, list[str]] = {}
        self._sat: dict[str, bool] = {}
        # cluster ids per kind, lexicographic, fixed at construction
        self._by_kind: dict[ResourceKind, list[str]] = {}
        for cid in sorted(clusters):
            self._by_kind.setdefault(clusters[cid].spec.kind, []).append(cid)

    # -- queue ------------------------------------------------------------

    def enqueue(self, job: JobRecord, now_ms: int) -> QueueEntry:
        """Insert a Queued job preserving the total order.

        A job requeued after a node loss keeps its original submit_seq, so
        it goes back to its old position rather than the tail.
        """
        job_id = job.job_id
        if job_id in self._queue_entries or self._find_cluster_of(job_id) is not None:
            raise DuplicateJob(job_id)
        if job_id in self._seq_of_job:
            seq = self._seq_of_job[job_id]
        else:
            seq = self._submit_seq
            self._submit_seq += 1
            self._seq_of_job[job_id] = seq
        prefs = self.effective_preferences(job)
        entry = QueueEntry(job_id=job_id, priority=job.spec.priority, submit_seq=seq,
                           remaining_kind_preferences=prefs)
        bisect.insort(self._queue_keys, entry.sort_key)
        self._queue_entries[job_id] = entry
        needed = job.spec.needed_nodes()
        self._needed[job_id] = needed
        self._wall[job_id] = job.spec.walltime_limit_ms
        self._accept[job_id] = self._acceptable_clusters(prefs)
        self._sat[job_id] = any(self.clusters[cid].spec.node_count >= needed
                                for cid in self._accept[job_id])
        return entry

    def remove_queued(self, job_id: str) -> bool:
        entry = self._queue_entries.pop(job_id, None)
        if entry is None:
            return False
        idx = bisect.bisect_left(self._queue_keys, entry.sort_key)
        del self._queue_keys[idx]
        return True

    def queued_jobs(self) -> list[str]:
        """Job ids in queue order."""
        return [key[2] for key in self._queue_keys]

    def queue_length(self) -> int:
        return len(self._queue_keys)

    def submit_seq_of(self, job_id: str) -> int:
        return self._seq_of_job[job_id]

    # -- helpers ----------------------------------------------------------

    def effective_preferences(self, job: JobRecord) -> tuple[ResourceKind, ...]:
        """Kinds the scheduler may actually use for this job.

        Elastic jobs run only on cloud pools. Rigid jobs drop the cloud
        kind unless hybrid placement of rigid work on spare VMs is on.
        With first_preference_only (the statically partitioned baseline)
        a rigid job is pinned to its primary kind.
        """
        if isinstance(job.spec.shape, Elastic):
            return (ResourceKind.CLOUD,)
        prefs = job.spec.kind_preferences
        if self.first_preference_only:
            prefs = prefs[:1]
        if not self.hybrid_rigid_on_cloud:
            prefs = tuple(k for k in prefs if k is not ResourceKind.CLOUD)
        return prefs

    def _acceptable_clusters(self, prefs: tuple[ResourceKind, ...]) -> list[str]:
        out = []
        for kind in prefs:
            out.extend(self._by_kind.get(kind, []))
        return out

    def is_satisfiable(self, job: JobRecord) -> bool:
        """True if some acceptable cluster owns enough nodes in total."""
        needed = job.spec.needed_nodes()
        for cid in self._acceptable_clusters(self.effective_preferences(job)):
            if self.clusters[cid].spec.node_count >= needed:
                return True
        return False

    def _find_cluster_of(self, job_id: str) -> Optional[str]:
        for cid, cs in self.clusters.items():
            if job_id in cs.allocations:
                return cid
        return None

    # -- planning ---------------------------------------------------------

    def plan(self, now_ms: int) -> DispatchDecision:
        """One scheduling pass over the queue at virtual time now_ms.

        Starts the head of the queue (and successive heads) while capacity
        lasts; when a head cannot start, computes its reservation and
        backfills later entries that provably do not delay it.
        """
        starts: list[tuple[str, Allocation]] = []
        advisories: list[Unsatisfiable] = []
        reservation: Optional[Reservation] = None
        reserved_set: frozenset[int] = frozenset()
        res_cid: Optional[str] = None
        res_start = 0
        res_usable = 0
        free: dict[str, list[int]] = {}
        cycle_deadline: dict[str, dict[int, int]] = {}
        free_len = {cid: cs.free_count() for cid, cs in self.clusters.items()}
        free_total = sum(free_len.values())

        for _key in self._queue_keys:
            job_id = _key[2]
            if free_total == 0 and reservation is not None:
                break   # no node anywhere, head already protected: nothing can start
            needed = self._needed[job_id]
            if not self._sat[job_id]:
                advisories.append(Unsatisfiable(job_id=job_id, needed=needed))
                continue
            acceptable = self._accept[job_id]
            wall = self._wall[job_id]
            if reservation is not None:
                # exact capacity screen; mirrors the per-cluster length
                # tests _place_backfill would run, without the call
                for cid in acceptable:
                    if cid == res_cid and now_ms + wall > res_start:
                        if res_usable >= needed:
                            break
                    elif free_len[cid] >= needed:
                        break
                else:
                    continue
            job = self.records[job_id]
            if reservation is None:
                placed = self._place_now(acceptable, needed, free)
                if placed is not None:
                    cid, nodes = placed
                    alloc = self.clusters[cid].allocate(job_id, nodes, now_ms, now_ms + wall)
                    cycle_deadline.setdefault(cid, {}).update({n: now_ms + wall for n in nodes})
                    starts.append((job_id, alloc))
                    free_total -= needed
                    free_len[cid] -= needed
                    continue
                reservation = self._reserve(job, acceptable, needed, now_ms, free, cycle_deadline)
                if reservation is None:
                    # Head cannot be placed at any future time we can bound
                    # (nodes down or held); do not backfill past it.
                    break
                if not self.backfill:
                    break
                reserved_set = frozenset(reservation.node_indices)
                res_cid = reservation.cluster_id
                res_start = reservation.start_ms
                res_usable = sum(1 for n in self._free(res_cid, free)
                                 if n not in reserved_set)
                continue
            placed = self._place_backfill(acceptable, needed, free, reservation,
                                          reserved_set, now_ms, wall)
            if placed is not None:
                cid, nodes = placed
                alloc = self.clusters[cid].allocate(job_id, nodes, now_ms, now_ms + wall)
                cycle_deadline.setdefault(cid, {}).update({n: now_ms + wall for n in nodes})
                starts.append((job_id, alloc))
                free_total -= needed
                free_len[cid] -= needed
                if cid == res_cid:
                    res_usable -= sum(1 for n in nodes if n not in reserved_set)

        for job_id, _ in starts:
            self.remove_queued(job_id)
        return DispatchDecision(starts=tuple(starts), reservation=reservation,
                                advisories=tuple(advisories))

    def _free(self, cid: str, cache: dict[str, list[int]]) -> list[int]:
        if cid not in cache:
            cache[cid] = self.clusters[cid].free_nodes()
        return cache[cid]

    def _place_now(self, acceptable, needed: int, free_cache) -> Optional[tuple[str, tuple[int, ...]]]:
        """First acceptable cluster with capacity; nodes first-fit ascending."""
        for cid in acceptable:
            nodes = self._free(cid, free_cache)
            if len(nodes) >= needed:
                chosen = tuple(nodes[:needed])
                del nodes[:needed]
                return cid, chosen
        return None

    def _place_backfill(self, acceptable, needed: int, free_cache, reservation: Reservation,
                        reserved: frozenset[int], now_ms: int,
                        wall_ms: int) -> Optional[tuple[str, tuple[int, ...]]]:
        """Placement that cannot delay the reserved head.

        On the reserved cluster the candidate must either end by the
        reservation start or avoid the reserved node set entirely; other
        clusters are unconstrained.
        """
        for cid in acceptable:
            nodes = self._free(cid, free_cache)
            if len(nodes) < needed:
                continue
            if cid == reservation.cluster_id and now_ms + wall_ms > reservation.start_ms:
                usable = [n for n in nodes if n not in reserved]
            else:
                usable = nodes
            if len(usable) >= needed:
                chosen = tuple(usable[:needed])
                for n in chosen:
                    nodes.remove(n)
                return cid, chosen
        return None

    def _reserve(self, job: JobRecord, acceptable, needed: int, now_ms: int,
                 free_cache, cycle_deadline) -> Optional[Reservation]:
        """Earliest time enough nodes free up on any acceptable cluster.

        Availability of a busy node is the walltime-bounded end of its
        allocation; down and held nodes are not available at any bounded
        time. Ties between clusters go to preference scan order.
        """
        best: Optional[tuple[int, str, tuple[int, ...]]] = None
        for cid in acceptable:
            cs = self.clusters[cid]
            if cs.spec.node_count < needed:
                continue
            avail: list[tuple[int, int]] = []  # (avail_time, node)
            free_now = set(self._free(cid, free_cache))
            deadlines = cs.deadline_by_node()
            deadlines.update(cycle_deadline.get(cid, {}))
            for n in range(cs.spec.node_count):
                if n in free_now:
                    avail.append((now_ms, n))
                elif n in deadlines:
                    avail.append((deadlines[n], n))
                # down or held: unavailable
            if len(avail) < needed:
                continue
            avail.sort()
            start = max(now_ms, avail[needed - 1][0])
            chosen = tuple(sorted(n for t, n in avail if t <= start)[:needed])
            if best is None or start < best[0]:
                best = (start, cid, chosen)
        if best is None:
            return None
        start, cid, chosen = best
        return Reservation(job_id=job.job_id, cluster_id=cid, node_indices=chosen,
                           start_ms=start,
                           expected_end_ms=start + job.spec.walltime_limit_ms)

    # -- releases and cancellation ---------------------------------------

    def release(self, job_id: str) -> tuple[str, tuple[int, ...]]:
        """Free all nodes of a live allocation; returns (cluster_id, nodes)."""
        cid = self._find_cluster_of(job_id)
        if cid is None:
            raise NoAllocation(job_id)
        return cid, self.clusters[cid].release(job_id)

    def cancel(self, job_id: str, now_ms: int) -> tuple[JobState, tuple[int, ...]]:
        """Cancel wherever the job currently is; returns (new state, freed nodes)."""
        job = self.records.get(job_id)
        if job is None:
            raise UnknownJob(job_id)
        if job.state.terminal:
            raise AlreadyTerminal(job_id, job.state)
        freed: tuple[int, ...] = ()
        if job.state is JobState.QUEUED:
            self.remove_queued(job_id)
        elif job.state in (JobState.DISPATCHED, JobState.RUNNING):
            _, freed = self.release(job_id)
        job.state = transition(job.state, LifecycleEvent.CANCEL_REQUESTED)
        return job.state, freed

    # -- elastic fair share ------------------------------------------------

    def running_elastic_on(self, cid: str) -> list[str]:
        """Running elastic job ids on a cloud cluster, by submission order."""
        cs = self.clusters[cid]
        out = []
        for job_id in cs.allocations:
            job = self.records[job_id]
            if isinstance(job.spec.shape, Elastic) and job.state is JobState.RUNNING:
                out.append(job_id)
        out.sort(key=lambda j: self._seq_of_job[j])
        return out

    def elastic_targets(self, cid: str, reservation: Optional[Reservation] = None
                        ) -> list[tuple[str, int]]:
        """Fair-share worker targets for the running elastic jobs on `cid`.

        The distributable pool is the cluster's free nodes plus nodes held
        by elastic jobs; free nodes inside a head reservation on this
        cluster are off limits so that growth cannot delay the head.
        """
        cs = self.clusters[cid]
        jobs = self.running_elastic_on(cid)
        if not jobs:
            return []
        free = cs.free_nodes()
        if reservation is not None and reservation.cluster_id == cid:
            reserved = set(reservation.node_indices)
            free = [n for n in free if n not in reserved]
        held_by_elastic = sum(len(cs.allocations[j].node_indices) for j in jobs)
        pool = len(free) + held_by_elastic
        bounds = []
        for job_id in jobs:
            shape = self.records[job_id].spec.shape
            bounds.append((shape.min_workers, shape.max_workers))
        targets = fair_share_targets(pool, bounds)
        return list(zip(jobs, targets))

    def rescale_elastic(self, job_id: str, now_ms: int) -> int:
        """Recompute this job's fair-share worker count and apply it.

        Returns the new worker count. The engine is responsible for
        crediting progress before calling this and for logging the change.
        """
        job = self.records.get(job_id)
        if job is None:
            raise UnknownJob(job_id)
        if not isinstance(job.spec.shape, Elastic):
            raise NotElastic(job_id)
        if job.state is not JobState.RUNNING:
            raise NotRunning(job_id)
        cid = self._find_cluster_of(job_id)
        if cid is None:
            raise NoAllocation(job_id)
        for jid, target in self.elastic_targets(cid):
            if jid == job_id:
                self.apply_worker_count(job_id, target)
                return target
        raise NotRunning(job_id)

    def apply_worker_count(self, job_id: str, target: int) -> tuple[int, ...]:
        """Shrink or grow a running elastic allocation to `target` workers.

        Shrinks drop the highest node indices; growth takes the lowest
        free indices. Growth is clamped by what is actually free.
        """
        cid = self._find_cluster_of(job_id)
        if cid is None:
            raise NoAllocation(job_id)
        cs = self.clusters[cid]
        alloc = cs.allocations[job_id]
        current = list(alloc.node_indices)
        if target < len(current):
            new_nodes = tuple(current[: target])
        elif target > len(current):
            grab = cs.free_nodes()[: target - len(current)]
            new_nodes = tuple(sorted(current + grab))
        else:
            return alloc.node_indices
        cs.resize(job_id, new_nodes)
        return new_nodes


def fair_share_targets(pool: int, bounds: list[tuple[int, int]]) -> list[int]:
    """Integer fair shares of `pool` nodes over jobs with (min, max) bounds.

    Base share is pool // n with the remainder going to the earliest
    submitters; each share is clamped into its job's bounds. If clamping
    at minima oversubscribes the pool, the overage is taken back from the
    latest submitters (never below a job's minimum).
    """
    n = len(bounds)
    if n == 0:
        return []
    fair, rem = divmod(pool, n)
    targets = []
    for i, (lo, hi) in enumerate(bounds):
        share = fair + (1 if i < rem else 0)
        targets.append(min(max(share, lo), hi))
    excess = sum(targets) - pool
    if excess > 0:
        for i in range(n - 1, -1, -1):
            if excess <= 0:
                break
            cut = min(excess, targets[i] - bounds[i][0])
            targets[i] -= cut
            excess -= cut
    return targets
