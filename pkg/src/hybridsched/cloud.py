"""Top-layer platform concerns: accounts, quotas, routing, vclusters.

Sits above the scheduler. Decides whether a submission is admitted (user
quota headroom), which layer it belongs to (elastic work to the cloud
pool, rigid work to the batch clusters), and carves user-provisioned
virtual clusters out of free cloud nodes, hiding them from the batch
scheduler for as long as they live.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .model import Elastic, JobSpec, ResourceKind
from .engine import Simulation


class CloudError(Exception):
    pass


class DuplicateUser(CloudError):
    def __init__(self, user_id: str):
        super().__init__(f"user {user_id!r} already exists")


class UnknownUser(CloudError):
    def __init__(self, user_id: str):
        self.user_id = user_id
        super().__init__(f"no user {user_id!r}")


class UnknownVCluster(CloudError):
    def __init__(self, vcluster_id: str):
        super().__init__(f"no vcluster {vcluster_id!r}")


class AlreadyReleased(CloudError):
    def __init__(self, vcluster_id: str):
        super().__init__(f"vcluster {vcluster_id!r} already released")


class InsufficientCloudCapacity(CloudError):
    def __init__(self, requested: int):
        self.requested = requested
        super().__init__(f"no cloud cluster has {requested} free nodes")


class QuotaExceeded(CloudError):
    def __init__(self, detail: str):
        super().__init__(detail)


class BadQuota(CloudError):
    pass


class PartitionViolation(CloudError):
    pass


@dataclass(frozen=True)
class Quota:
    max_concurrent_jobs: int
    max_nodes_in_use: int
    max_vcluster_nodes: int

    def __post_init__(self):
        for name in ("max_concurrent_jobs", "max_nodes_in_use", "max_vcluster_nodes"):
            if getattr(self, name) < 0:
                raise BadQuota(f"{name} must be >= 0")


@dataclass(frozen=True)
class UserAccount:
    user_id: str
    display_name: str
    quota: Quota
    created_at_ms: int


class TargetLayer(str, Enum):
    CLOUD = "cloud"
    HPC = "hpc"


class RejectReason(str, Enum):
    CONCURRENCY_QUOTA = "ConcurrencyQuota"
    NODE_QUOTA = "NodeQuota"
    UNROUTABLE_KIND = "UnroutableKind"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: Optional[RejectReason] = None
    layer: Optional[TargetLayer] = None


class VClusterState(str, Enum):
    PROVISIONING = "Provisioning"
    READY = "Ready"
    RELEASED = "Released"


@dataclass
class VirtualCluster:
    vcluster_id: str
    owner: str
    cluster_id: str
    node_indices: tuple[int, ...]
    image: str
    state: VClusterState
    ready_at_ms: int


def projected_nodes(spec: JobSpec) -> int:
    """Worst-case node demand a job can ever hold at once.

    Elastic jobs are charged at max_workers so quota soundness survives
    later growth.
    """
    if isinstance(spec.shape, Elastic):
        return spec.shape.max_workers
    return spec.shape.node_count


class CloudLayer:
    """User management and task allocation over one simulation instance."""

    def __init__(self, sim: Simulation, provision_delay_ms: int = 0):
        self.sim = sim
        self.provision_delay_ms = provision_delay_ms
        self.users: dict[str, UserAccount] = {}
        self.vclusters: dict[str, VirtualCluster] = {}
        self._vc_idx = 0

    # -- users ------------------------------------------------------------

    def create_user(self, user_id: str, quota: Quota, display_name: str = "") -> UserAccount:
        if not user_id:
            raise CloudError("user_id must be non-empty")
        if user_id in self.users:
            raise DuplicateUser(user_id)
        account = UserAccount(user_id=user_id, display_name=display_name or user_id,
                              quota=quota, created_at_ms=self.sim.now_ms)
        self.users[user_id] = account
        return account

    def get_user(self, user_id: str) -> UserAccount:
        account = self.users.get(user_id)
        if account is None:
            raise UnknownUser(user_id)
        return account

    def list_users(self) -> list[UserAccount]:
        return [self.users[u] for u in sorted(self.users)]

    # -- admission and routing --------------------------------------------

    def _live_jobs_of(self, user_id: str) -> list:
        return [r for r in self.sim.records.values()
                if r.spec.user_id == user_id and not r.state.terminal]

    def admit(self, spec: JobSpec) -> Verdict:
        """Quota check against the user's live jobs; admission-time only."""
        account = self.get_user(spec.user_id)
        live = self._live_jobs_of(spec.user_id)
        if len(live) + 1 > account.quota.max_concurrent_jobs:
            return Verdict(accepted=False, reason=RejectReason.CONCURRENCY_QUOTA)
        committed = sum(projected_nodes(r.spec) for r in live)
        if committed + projected_nodes(spec) > account.quota.max_nodes_in_use:
            return Verdict(accepted=False, reason=RejectReason.NODE_QUOTA)
        return Verdict(accepted=True)

    def route(self, spec: JobSpec) -> Verdict:
        """Pick the layer an admitted job runs in.

        Elastic work always belongs to the cloud pool. Rigid work goes to
        the batch clusters; a rigid job whose only preference is cloud is
        unroutable unless rigid-on-cloud placement is enabled.
        """
        if isinstance(spec.shape, Elastic):
            return Verdict(accepted=True, layer=TargetLayer.CLOUD)
        kinds = set(spec.kind_preferences)
        if kinds == {ResourceKind.CLOUD} and not self.sim.config.hybrid_rigid_on_cloud:
            return Verdict(accepted=False, reason=RejectReason.UNROUTABLE_KIND)
        return Verdict(accepted=True, layer=TargetLayer.HPC)

    # -- virtual clusters --------------------------------------------------

    def _vc_nodes_of(self, user_id: str) -> int:
        return sum(len(vc.node_indices) for vc in self.vclusters.values()
                   if vc.owner == user_id and vc.state is not VClusterState.RELEASED)

    def provision_vcluster(self, user_id: str, node_count: int, image: str) -> VirtualCluster:
        """Carve node_count free cloud nodes into a private vcluster.

        First-fit: lexicographically first cloud cluster with enough free
        nodes, lowest indices first. The nodes vanish from scheduler view
        until release.
        """
        account = self.get_user(user_id)
        if node_count < 1:
            raise CloudError("node_count must be >= 1")
        held = self._vc_nodes_of(user_id)
        if held + node_count > account.quota.max_vcluster_nodes:
            raise QuotaExceeded(
                f"user {user_id} holds {held} vcluster nodes; "
                f"+{node_count} exceeds quota {account.quota.max_vcluster_nodes}")
        chosen = None
        for cid in sorted(self.sim.clusters()):
            cs = self.sim.clusters()[cid]
            if cs.spec.kind is not ResourceKind.CLOUD:
                continue
            free = cs.free_nodes()
            if len(free) >= node_count:
                chosen = (cid, tuple(free[:node_count]))
                break
        if chosen is None:
            raise InsufficientCloudCapacity(node_count)
        cid, nodes = chosen
        self.sim.hold_nodes(cid, nodes)
        vcluster_id = f"vc{self._vc_idx:04d}"
        self._vc_idx += 1
        now = self.sim.now_ms
        state = VClusterState.PROVISIONING if self.provision_delay_ms > 0 else VClusterState.READY
        vc = VirtualCluster(vcluster_id=vcluster_id, owner=user_id, cluster_id=cid,
                            node_indices=nodes, image=image, state=state,
                            ready_at_ms=now + self.provision_delay_ms)
        self.vclusters[vcluster_id] = vc
        self.verify_partition(cid)
        return vc

    def get_vcluster(self, vcluster_id: str) -> VirtualCluster:
        vc = self.vclusters.get(vcluster_id)
        if vc is None:
            raise UnknownVCluster(vcluster_id)
        if vc.state is VClusterState.PROVISIONING and self.sim.now_ms >= vc.ready_at_ms:
            vc.state = VClusterState.READY
        return vc

    def list_vclusters(self) -> list[VirtualCluster]:
        return [self.get_vcluster(v) for v in sorted(self.vclusters)]

    def release_vcluster(self, vcluster_id: str) -> tuple[int, ...]:
        vc = self.vclusters.get(vcluster_id)
        if vc is None:
            raise UnknownVCluster(vcluster_id)
        if vc.state is VClusterState.RELEASED:
            raise AlreadyReleased(vcluster_id)
        self.sim.release_hold(vc.cluster_id, vc.node_indices)
        vc.state = VClusterState.RELEASED
        self.verify_partition(vc.cluster_id)
        return vc.node_indices

    # -- invariants --------------------------------------------------------

    def verify_partition(self, cluster_id: str):
        """free / batch-allocated / vcluster-held must partition the pool.

        Down nodes are excluded from all three sets, so the union check
        allows for them.
        """
        cs = self.sim.clusters()[cluster_id]
        free = set(cs.free_nodes())
        allocated = set()
        for alloc in cs.allocations.values():
            allocated.update(alloc.node_indices)
        held = set(cs.held)
        if free & allocated or free & held or (allocated & held):
            raise PartitionViolation(
                f"overlapping node sets on {cluster_id}: "
                f"free={sorted(free)} allocated={sorted(allocated)} held={sorted(held)}")
        universe = set(range(cs.spec.node_count))
        covered = free | allocated | held | cs.down
        if covered != universe:
            raise PartitionViolation(
                f"nodes unaccounted for on {cluster_id}: missing {sorted(universe - covered)}")
