"""Randomized lifecycle driver over the cluster and placement APIs.

Each walk applies a random sequence of plan/prewarm/promote/grace/reclaim/
release operations to a small cluster and checks, after every event, that
page accounting holds, that no two replica groups partially overlap, and that
only legal role transitions occurred. Used by both the module property tests
and the acceptance gate.
"""

from __future__ import annotations

import random

from prewarmsim.cluster import (
    Cluster,
    InstanceState,
    LEGAL_ROLE_TRANSITIONS,
    ModelSpec,
    Role,
)
from prewarmsim.placement import (
    Category,
    ClusterSnapshot,
    GpuView,
    Replica,
    ReplicaStatus,
    choose_eviction_victims,
    plan_placement,
)


class WalkError(AssertionError):
    pass


class LifecycleWalk:
    def __init__(self, seed: int, n_servers: int, gpus_per_server: int):
        self.rng = random.Random(seed)
        self.cluster = Cluster(
            n_servers=n_servers,
            gpus_per_server=gpus_per_server,
            pages_per_gpu=100,
            page_size=1,
            bandwidth=1.0,
        )
        self.transitions: list[tuple[Role, Role]] = []
        self.cluster.role_observer = lambda gpu, old, new: self.transitions.append(
            (old, new)
        )
        self.specs = {
            "s1": ModelSpec("s1", weight_bytes=20, parallelism=1, layers=4),
            "s2": ModelSpec("s2", weight_bytes=30, parallelism=1, layers=4),
            "d2": ModelSpec("d2", weight_bytes=40, parallelism=2, layers=4),
        }
        if gpus_per_server >= 4:
            self.specs["q4"] = ModelSpec("q4", weight_bytes=80, parallelism=4, layers=4)
        self.replicas: list[Replica] = []
        self._rid = 0
        self.ops_run = 0

    # ------------------------------------------------------------- helpers

    def _snapshot(self) -> ClusterSnapshot:
        return ClusterSnapshot(
            gpus=tuple(
                GpuView(
                    g.gpu_id,
                    g.server_id,
                    g.free_pages,
                    g.role in (Role.IDLE, Role.UNIVERSAL, Role.DEDICATED_GRACE),
                )
                for g in self.cluster.gpus
            ),
            page_size=1,
        )

    def _live(self) -> list[Replica]:
        return [
            r
            for r in self.replicas
            if r.status in (ReplicaStatus.LOADING, ReplicaStatus.READY)
        ]

    def _protected_groups(self) -> list[Replica]:
        pseudo = [
            Replica(-1 - i.instance_id, i.model_id, Category.BASIC, 0, 0.0,
                    frozenset(i.gpu_ids), ReplicaStatus.READY)
            for i in self.cluster.instances.values()
            if i.state == InstanceState.GRACE
        ]
        return self._live() + pseudo

    # ------------------------------------------------------------- operations

    def op_plan(self) -> None:
        new = []
        for _ in range(self.rng.randint(1, 3)):
            model = self.rng.choice(sorted(self.specs))
            score = self.rng.uniform(0.1, 100.0)
            cat = self.rng.choice([Category.BASIC, Category.BURST])
            new.append(Replica(self._rid, model, cat, 0, score))
            self._rid += 1
        plan = plan_placement(new, self._snapshot(), self._protected_groups(), self.specs)
        for a in plan.assignments:
            spec = self.specs[a.replica.model_id]
            a.replica.gpu_group = frozenset(a.gpu_group)
            a.replica.status = (
                ReplicaStatus.READY
                if self.rng.random() < 0.7
                else ReplicaStatus.LOADING
            )
            pages = spec.partition_pages(1)
            for gid in a.gpu_group:
                slot = self.cluster.begin_prewarm(
                    self.cluster.gpu(gid), spec, pages, required_layers=1
                )
                slot.layers_loaded = (
                    spec.layers if a.replica.status == ReplicaStatus.READY else 1
                )
            self.replicas.append(a.replica)

    def op_promote(self) -> None:
        candidates = []
        for r in self._live():
            if r.status != ReplicaStatus.READY or not r.gpu_group:
                continue
            if all(
                self.cluster.gpu(g).role == Role.UNIVERSAL for g in r.gpu_group
            ):
                candidates.append(r)
        if candidates:
            replica = self.rng.choice(sorted(candidates, key=lambda r: r.replica_id))
            group = tuple(sorted(replica.gpu_group))
            victims = [
                v
                for v in choose_eviction_victims(group, self._live())
                if v is not replica
            ]
            spec = self.specs[replica.model_id]
            inst, _ = self.cluster.promote_to_dedicated(group, spec, 1)
            replica.status = ReplicaStatus.CONSUMED
            for v in victims:
                v.status = ReplicaStatus.INVALIDATED
                for gid in sorted(v.gpu_group):
                    if gid in group:
                        continue
                    gpu = self.cluster.gpu(gid)
                    if v.model_id in gpu.slots and not gpu.slots[v.model_id].active:
                        self.cluster.evict_slot(gpu, v.model_id)
            inst.state = InstanceState.ACTIVE
            return
        # cold path onto idle GPUs
        spec = self.specs[self.rng.choice(sorted(self.specs))]
        idle = [g for g in self.cluster.gpus if g.role == Role.IDLE]
        by_server: dict[int, list[int]] = {}
        for g in idle:
            by_server.setdefault(g.server_id, []).append(g.gpu_id)
        for server in sorted(by_server):
            ids = sorted(by_server[server])
            if len(ids) >= spec.parallelism:
                group = tuple(ids[: spec.parallelism])
                inst, _ = self.cluster.promote_to_dedicated(group, spec, 1)
                inst.state = InstanceState.ACTIVE
                return

    def op_grace(self) -> None:
        active = [
            i
            for i in self.cluster.instances.values()
            if i.state == InstanceState.ACTIVE
        ]
        if not active:
            return
        inst = self.rng.choice(sorted(active, key=lambda i: i.instance_id))
        self.cluster.enter_grace(inst)

    def op_reclaim(self) -> None:
        grace = [
            i
            for i in self.cluster.instances.values()
            if i.state == InstanceState.GRACE
        ]
        if not grace:
            return
        inst = self.rng.choice(sorted(grace, key=lambda i: i.instance_id))
        for gid in inst.gpu_ids:
            gpu = self.cluster.gpu(gid)
            capacity = gpu.kv_capacity_pages * self.cluster.page_size
            inflight = self.rng.randint(0, inst.max_batch)
            used = self.rng.uniform(0, capacity)
            self.cluster.reclaim_on_completion(gpu, inflight, inst.max_batch, used)

    def op_release(self) -> None:
        grace = [
            i
            for i in self.cluster.instances.values()
            if i.state == InstanceState.GRACE
        ]
        if not grace:
            return
        inst = self.rng.choice(sorted(grace, key=lambda i: i.instance_id))
        self.cluster.release_instance(inst)
        self.replicas.append(
            Replica(
                self._rid,
                inst.model_id,
                Category.BASIC,
                0,
                0.0,
                frozenset(inst.gpu_ids),
                ReplicaStatus.READY,
            )
        )
        self._rid += 1

    # ------------------------------------------------------------- checks

    def check(self) -> None:
        problems = self.cluster.check_invariants()
        if problems:
            raise WalkError(f"cluster invariants: {problems}")
        groups = [r.gpu_group for r in self._live() if r.gpu_group]
        groups += [
            frozenset(i.gpu_ids)
            for i in self.cluster.instances.values()
            if i.state != InstanceState.TERMINATED
        ]
        for i, a in enumerate(groups):
            for b in groups[i + 1 :]:
                if a & b and not (a <= b or b <= a):
                    raise WalkError(f"partial overlap: {sorted(a)} vs {sorted(b)}")
        for old, new in self.transitions:
            if (old, new) not in LEGAL_ROLE_TRANSITIONS:
                raise WalkError(f"illegal transition {old} -> {new}")
        # replicas claiming readiness must have slots everywhere
        for r in self._live():
            if r.gpu_group and r.status == ReplicaStatus.READY:
                for gid in r.gpu_group:
                    if r.model_id not in self.cluster.gpu(gid).slots:
                        raise WalkError(
                            f"ready replica {r.replica_id} missing slot on {gid}"
                        )

    def run(self, steps: int) -> None:
        ops = [
            (self.op_plan, 3),
            (self.op_promote, 3),
            (self.op_grace, 2),
            (self.op_reclaim, 2),
            (self.op_release, 2),
        ]
        weighted = [op for op, w in ops for _ in range(w)]
        for _ in range(steps):
            op = self.rng.choice(weighted)
            op()
            self.ops_run += 1
            self.check()


def run_walks(n_sequences: int, base_seed: int, max_gpus: int = 16) -> int:
    """Run n randomized walks on clusters of 2..max_gpus GPUs; returns total
    events executed. Raises on any invariant violation."""
    total = 0
    for i in range(n_sequences):
        rng = random.Random(base_seed + i)
        n_gpus = rng.randint(2, max_gpus)
        if n_gpus % 2 == 0 and rng.random() < 0.5:
            servers, per_server = 2, n_gpus // 2
        else:
            servers, per_server = 1, n_gpus
        walk = LifecycleWalk(
            seed=base_seed + i, n_servers=servers, gpus_per_server=per_server
        )
        walk.run(steps=rng.randint(5, 14))
        total += walk.ops_run
    return total
