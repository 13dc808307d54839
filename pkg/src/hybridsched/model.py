"""Core domain types shared by every layer of the platform.

Defines the typed resource pools, job descriptions, the job lifecycle
state machine, and the runtime model that converts abstract work into
virtual duration on a pool of a given speed.

All times are integer virtual milliseconds and all arithmetic is integer
arithmetic; nothing in here touches floating point, which is what makes
simulation runs reproducible byte-for-byte across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union


class ResourceKind(str, Enum):
    """The four pool types a job may target."""

    CPU = "cpu"
    GPU = "gpu"
    KNL = "knl"
    CLOUD = "cloud"

    @classmethod
    def parse(cls, text: str) -> "ResourceKind":
        try:
            return cls(text)
        except ValueError:
            raise UnknownKind(text) from None

    def __str__(self) -> str:
        return self.value


class JobState(str, Enum):
    """Lifecycle states of a job.

    Completed, Failed, Cancelled and TimedOut are terminal: once reached,
    no event moves the job anywhere else.
    """

    SUBMITTED = "Submitted"
    QUEUED = "Queued"
    DISPATCHED = "Dispatched"
    RUNNING = "Running"
    COMPLETED = "Completed"
    FAILED = "Failed"
    CANCELLED = "Cancelled"
    TIMED_OUT = "TimedOut"

    @property
    def terminal(self) -> bool:
        return self in _TERMINAL_STATES


_TERMINAL_STATES = frozenset(
    {JobState.COMPLETED, JobState.FAILED, JobState.CANCELLED, JobState.TIMED_OUT}
)


class LifecycleEvent(str, Enum):
    """Events that drive the job state machine."""

    VALIDATED = "Validated"
    SCHEDULED = "Scheduled"
    STARTED = "Started"
    FINISHED = "Finished"
    ERRORED = "Errored"
    CANCEL_REQUESTED = "CancelRequested"
    WALLTIME_EXCEEDED = "WalltimeExceeded"
    NODE_LOST = "NodeLost"


@dataclass(frozen=True)
class Rigid:
    """Fixed node count for the whole run (classic HPC/MPI style)."""

    node_count: int


@dataclass(frozen=True)
class Elastic:
    """Worker count may vary between min and max while running.

    Only schedulable on cloud pools.
    """

    min_workers: int
    max_workers: int


JobShape = Union[Rigid, Elastic]


@dataclass(frozen=True)
class JobSpec:
    """A user's computing task as submitted.

    kind_preferences is an ordered list: the scheduler tries the first
    kind with a feasible cluster before falling through to later ones.
    """

    name: str
    user_id: str
    kind_preferences: tuple[ResourceKind, ...]
    shape: JobShape
    work_units: int
    walltime_limit_ms: int
    dataset_refs: tuple[str, ...] = ()
    priority: int = 0

    def needed_nodes(self) -> int:
        """Node count required to start: full size for rigid, min for elastic."""
        if isinstance(self.shape, Rigid):
            return self.shape.node_count
        return self.shape.min_workers


@dataclass(frozen=True)
class ClusterSpec:
    """A typed resource pool.

    speed_factor is work units per node per virtual second; it is how
    hardware differences (GPU vs CPU vs KNL) enter the model without
    modeling the hardware itself.
    """

    cluster_id: str
    kind: ResourceKind
    node_count: int
    cores_per_node: int
    speed_factor: int


@dataclass(frozen=True)
class Allocation:
    """A binding of a job to concrete nodes of one cluster."""

    job_id: str
    cluster_id: str
    node_indices: tuple[int, ...]
    start_ms: int

    def __post_init__(self):
        object.__setattr__(self, "node_indices", tuple(sorted(self.node_indices)))


@dataclass
class JobRecord:
    """Mutable per-job record tracked by the platform.

    allocation is present exactly while the job is Dispatched or Running.
    worker_history records (time_ms, worker_count) changes for elastic jobs.
    """

    job_id: str
    spec: JobSpec
    state: JobState = JobState.SUBMITTED
    submit_ms: Optional[int] = None
    start_ms: Optional[int] = None
    end_ms: Optional[int] = None
    allocation: Optional[Allocation] = None
    worker_history: list[tuple[int, int]] = field(default_factory=list)


# --- errors ---------------------------------------------------------------


class ValidationError(ValueError):
    """A job spec violates an invariant and is rejected."""

    code = "invalid"


class EmptyPreferences(ValidationError):
    code = "empty_preferences"

    def __init__(self):
        super().__init__("kind_preferences must not be empty")


class UnknownKind(ValidationError):
    code = "unknown_kind"

    def __init__(self, kind):
        self.kind = kind
        super().__init__(f"unknown or unconfigured resource kind: {kind}")


class DuplicateKind(ValidationError):
    code = "duplicate_kind"

    def __init__(self, kind):
        self.kind = kind
        super().__init__(f"resource kind listed twice: {kind}")


class BadShape(ValidationError):
    code = "bad_shape"

    def __init__(self, detail: str):
        super().__init__(f"bad job shape: {detail}")


class NonPositive(ValidationError):
    code = "non_positive"

    def __init__(self, fieldname: str):
        self.fieldname = fieldname
        super().__init__(f"{fieldname} must be >= 1")


class MalformedSpec(ValidationError):
    """Structural problem in the wire encoding (missing/unknown/wrongly typed field)."""

    code = "malformed_spec"


class InvalidTransition(Exception):
    """The (state, event) pair is not in the lifecycle table."""

    def __init__(self, state: JobState, event: LifecycleEvent):
        self.state = state
        self.event = event
        super().__init__(f"no transition from {state.value} on {event.value}")


# --- operations -----------------------------------------------------------


def validate_job(spec: JobSpec, known_kinds: set[ResourceKind]) -> JobSpec:
    """Check every JobSpec invariant; return the spec unchanged if it holds.

    known_kinds is the set of kinds offered by at least one configured
    cluster; a preference outside it is rejected as UnknownKind.
    """
    if not spec.kind_preferences:
        raise EmptyPreferences()
    seen = set()
    for kind in spec.kind_preferences:
        if kind in seen:
            raise DuplicateKind(kind)
        seen.add(kind)
        if kind not in known_kinds:
            raise UnknownKind(kind.value)
    if spec.work_units < 1:
        raise NonPositive("work_units")
    if spec.walltime_limit_ms < 1:
        raise NonPositive("walltime_limit_ms")
    if isinstance(spec.shape, Rigid):
        if spec.shape.node_count < 1:
            raise NonPositive("node_count")
    elif isinstance(spec.shape, Elastic):
        if spec.shape.min_workers < 1:
            raise NonPositive("min_workers")
        if spec.shape.max_workers < 1:
            raise NonPositive("max_workers")
        if spec.shape.min_workers > spec.shape.max_workers:
            raise BadShape(
                f"min_workers {spec.shape.min_workers} > max_workers {spec.shape.max_workers}"
            )
        if ResourceKind.CLOUD not in spec.kind_preferences:
            raise BadShape("elastic jobs run on the cloud pool; preferences must include cloud")
    else:
        raise BadShape(f"unrecognized shape {spec.shape!r}")
    return spec


# Lifecycle table. NodeLost from Running goes back to Queued while the
# retry budget lasts, to Failed once it is exhausted.
_TRANSITIONS: dict[tuple[JobState, LifecycleEvent], JobState] = {
    (JobState.SUBMITTED, LifecycleEvent.VALIDATED): JobState.QUEUED,
    (JobState.QUEUED, LifecycleEvent.SCHEDULED): JobState.DISPATCHED,
    (JobState.DISPATCHED, LifecycleEvent.STARTED): JobState.RUNNING,
    (JobState.RUNNING, LifecycleEvent.FINISHED): JobState.COMPLETED,
    (JobState.RUNNING, LifecycleEvent.ERRORED): JobState.FAILED,
    (JobState.RUNNING, LifecycleEvent.WALLTIME_EXCEEDED): JobState.TIMED_OUT,
    (JobState.SUBMITTED, LifecycleEvent.CANCEL_REQUESTED): JobState.CANCELLED,
    (JobState.QUEUED, LifecycleEvent.CANCEL_REQUESTED): JobState.CANCELLED,
    (JobState.DISPATCHED, LifecycleEvent.CANCEL_REQUESTED): JobState.CANCELLED,
    (JobState.RUNNING, LifecycleEvent.CANCEL_REQUESTED): JobState.CANCELLED,
}


def transition(state: JobState, event: LifecycleEvent, *, retries_left: int = 1) -> JobState:
    """Return the next state for (state, event) or raise InvalidTransition.

    retries_left only matters for NodeLost from Running: positive budget
    requeues the job, an exhausted budget fails it.
    """
    if state is JobState.RUNNING and event is LifecycleEvent.NODE_LOST:
        return JobState.QUEUED if retries_left > 0 else JobState.FAILED
    try:
        return _TRANSITIONS[(state, event)]
    except KeyError:
        raise InvalidTransition(state, event) from None


def job_duration_ms(work_units: int, speed_factor: int, nodes: int) -> int:
    """Virtual run time of `work_units` on `nodes` nodes at `speed_factor`.

    ceil(1000 * work_units / (speed_factor * nodes)), never below 1 ms.
    Python integers are unbounded, so the product cannot overflow.
    """
    if work_units < 1:
        raise NonPositive("work_units")
    if speed_factor < 1:
        raise NonPositive("speed_factor")
    if nodes < 1:
        raise NonPositive("nodes")
    rate = speed_factor * nodes
    return max(1, -(-1000 * work_units // rate))


# --- canonical JSON encoding ---------------------------------------------

_SPEC_REQUIRED = ("name", "user_id", "kind_preferences", "shape", "work_units", "walltime_limit_ms")
_SPEC_OPTIONAL = ("dataset_refs", "priority")


def job_spec_to_obj(spec: JobSpec) -> dict:
    """Canonical JSON object form of a JobSpec (snake_case, fixed field set)."""
    if isinstance(spec.shape, Rigid):
        shape = {"rigid": {"node_count": spec.shape.node_count}}
    else:
        shape = {
            "elastic": {
                "min_workers": spec.shape.min_workers,
                "max_workers": spec.shape.max_workers,
            }
        }
    return {
        "name": spec.name,
        "user_id": spec.user_id,
        "kind_preferences": [k.value for k in spec.kind_preferences],
        "shape": shape,
        "work_units": spec.work_units,
        "walltime_limit_ms": spec.walltime_limit_ms,
        "dataset_refs": list(spec.dataset_refs),
        "priority": spec.priority,
    }


def _require_int(obj: dict, key: str, where: str) -> int:
    value = obj.get(key)
    if not isinstance(value, int) or isinstance(value, bool):
        raise MalformedSpec(f"{where}.{key} must be an integer")
    return value


def _parse_shape(obj) -> JobShape:
    if not isinstance(obj, dict) or len(obj) != 1:
        raise MalformedSpec('shape must be {"rigid": {...}} or {"elastic": {...}}')
    tag, body = next(iter(obj.items()))
    if not isinstance(body, dict):
        raise MalformedSpec(f"shape.{tag} must be an object")
    if tag == "rigid":
        unknown = set(body) - {"node_count"}
        if unknown:
            raise MalformedSpec(f"unknown shape field: {sorted(unknown)[0]}")
        return Rigid(node_count=_require_int(body, "node_count", "shape.rigid"))
    if tag == "elastic":
        unknown = set(body) - {"min_workers", "max_workers"}
        if unknown:
            raise MalformedSpec(f"unknown shape field: {sorted(unknown)[0]}")
        return Elastic(
            min_workers=_require_int(body, "min_workers", "shape.elastic"),
            max_workers=_require_int(body, "max_workers", "shape.elastic"),
        )
    raise MalformedSpec(f"unknown shape tag: {tag}")


def job_spec_from_obj(obj: dict) -> JobSpec:
    """Parse the canonical JSON object form; unknown fields are rejected."""
    if not isinstance(obj, dict):
        raise MalformedSpec("job spec must be a JSON object")
    unknown = set(obj) - set(_SPEC_REQUIRED) - set(_SPEC_OPTIONAL)
    if unknown:
        raise MalformedSpec(f"unknown field: {sorted(unknown)[0]}")
    missing = [k for k in _SPEC_REQUIRED if k not in obj]
    if missing:
        raise MalformedSpec(f"missing field: {missing[0]}")
    if not isinstance(obj["name"], str):
        raise MalformedSpec("name must be a string")
    if not isinstance(obj["user_id"], str):
        raise MalformedSpec("user_id must be a string")
    kinds_raw = obj["kind_preferences"]
    if not isinstance(kinds_raw, list) or not all(isinstance(k, str) for k in kinds_raw):
        raise MalformedSpec("kind_preferences must be a list of strings")
    refs = obj.get("dataset_refs", [])
    if not isinstance(refs, list) or not all(isinstance(r, str) for r in refs):
        raise MalformedSpec("dataset_refs must be a list of strings")
    priority = obj.get("priority", 0)
    if not isinstance(priority, int) or isinstance(priority, bool):
        raise MalformedSpec("priority must be an integer")
    return JobSpec(
        name=obj["name"],
        user_id=obj["user_id"],
        kind_preferences=tuple(ResourceKind.parse(k) for k in kinds_raw),
        shape=_parse_shape(obj["shape"]),
        work_units=_require_int(obj, "work_units", "spec"),
        walltime_limit_ms=_require_int(obj, "walltime_limit_ms", "spec"),
        dataset_refs=tuple(refs),
        priority=priority,
    )


_CLUSTER_FIELDS = ("cluster_id", "kind", "node_count", "cores_per_node", "speed_factor")


def cluster_spec_to_obj(spec: ClusterSpec) -> dict:
    return {
        "cluster_id": spec.cluster_id,
        "kind": spec.kind.value,
        "node_count": spec.node_count,
        "cores_per_node": spec.cores_per_node,
        "speed_factor": spec.speed_factor,
    }


def cluster_spec_from_obj(obj: dict) -> ClusterSpec:
    if not isinstance(obj, dict):
        raise MalformedSpec("cluster spec must be a JSON object")
    unknown = set(obj) - set(_CLUSTER_FIELDS)
    if unknown:
        raise MalformedSpec(f"unknown field: {sorted(unknown)[0]}")
    missing = [k for k in _CLUSTER_FIELDS if k not in obj]
    if missing:
        raise MalformedSpec(f"missing field: {missing[0]}")
    if not isinstance(obj["cluster_id"], str) or not obj["cluster_id"]:
        raise MalformedSpec("cluster_id must be a non-empty string")
    spec = ClusterSpec(
        cluster_id=obj["cluster_id"],
        kind=ResourceKind.parse(obj["kind"]),
        node_count=_require_int(obj, "node_count", "cluster"),
        cores_per_node=_require_int(obj, "cores_per_node", "cluster"),
        speed_factor=_require_int(obj, "speed_factor", "cluster"),
    )
    return validate_cluster(spec)


def validate_cluster(spec: ClusterSpec) -> ClusterSpec:
    if spec.node_count < 1:
        raise NonPositive("node_count")
    if spec.cores_per_node < 1:
        raise NonPositive("cores_per_node")
    if spec.speed_factor < 1:
        raise NonPositive("speed_factor")
    return spec
