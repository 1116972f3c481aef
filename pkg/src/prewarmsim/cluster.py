"""Servers, GPU workers, the idle/universal/dedicated lifecycle, page-level
memory accounting, and prewarm slots.

State is mutated only through the operations below; the simulation engine
calls them from event handlers in timestamp order. Latency is computed by the
engine's latency model; this module owns the accounting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum


class Role(str, Enum):
    IDLE = "idle"
    UNIVERSAL = "universal"
    DEDICATED = "dedicated"
    DEDICATED_GRACE = "dedicated_grace"


LEGAL_ROLE_TRANSITIONS = {
    (Role.IDLE, Role.UNIVERSAL),
    (Role.UNIVERSAL, Role.DEDICATED),
    (Role.DEDICATED, Role.DEDICATED_GRACE),
    (Role.DEDICATED_GRACE, Role.UNIVERSAL),
    (Role.UNIVERSAL, Role.IDLE),
    (Role.IDLE, Role.DEDICATED),
}


class InstanceState(str, Enum):
    STARTING = "starting"
    ACTIVE = "active"
    GRACE = "grace"
    TERMINATED = "terminated"


class ClusterError(RuntimeError):
    pass


class IllegalTransition(ClusterError):
    pass


class InvariantViolation(AssertionError):
    pass


@dataclass
class ModelSpec:
    """Static description of a servable model."""

    model_id: str
    weight_bytes: int
    parallelism: int = 1
    max_batch: int = 32
    layers: int = 32
    prefill_a_ms: float = 0.1  # ms per input token
    prefill_b_ms: float = 5.0
    decode_c_ms: float = 25.0
    kv_bytes_per_token: int = 524_288
    cold_load_ms: float | None = None  # override; else derived from bandwidth
    initial_instances: int = 0

    def __post_init__(self):
        if self.parallelism < 1:
            raise ValueError(f"{self.model_id}: parallelism must be >= 1")
        if self.max_batch < 1:
            raise ValueError(f"{self.model_id}: max_batch must be >= 1")
        if self.layers < 1:
            raise ValueError(f"{self.model_id}: layers must be >= 1")
        if self.weight_bytes < 1:
            raise ValueError(f"{self.model_id}: weight_bytes must be >= 1")

    @property
    def partition_bytes(self) -> int:
        return -(-self.weight_bytes // self.parallelism)

    def partition_pages(self, page_size: int) -> int:
        return -(-self.partition_bytes // page_size)

    @property
    def layer_bytes(self) -> float:
        # Uniform per-layer split of a GPU's weight partition.
        return self.partition_bytes / self.layers

    def cold_load_latency(self, bandwidth: float) -> float:
        """Full weight-load latency per GPU, used as the prewarm-score weight."""
        if self.cold_load_ms is not None:
            return self.cold_load_ms
        return self.partition_bytes / bandwidth


@dataclass
class PrewarmSlot:
    slot_id: int
    model_id: str
    mapped_pages: int
    required_prewarm_layers: int
    weight_bytes_loaded: float = 0.0
    layers_loaded: int = 0
    active: bool = False
    load_start: float | None = None
    load_finish: float | None = None


@dataclass
class GpuWorker:
    gpu_id: int
    server_id: int
    total_pages: int
    page_size: int
    role: Role = Role.IDLE
    slots: dict[str, PrewarmSlot] = field(default_factory=dict)
    kv_pages_mapped: int = 0
    kv_pages_used: int = 0  # last observed consumption, trace-driven
    kv_capacity_pages: int = 0  # fixed at promotion; basis for the reservation target
    instance_id: int | None = None

    @property
    def slot_pages(self) -> int:
        return sum(s.mapped_pages for s in self.slots.values())

    @property
    def free_pages(self) -> int:
        return self.total_pages - self.slot_pages - self.kv_pages_mapped


@dataclass
class Instance:
    instance_id: int
    model_id: str
    gpu_ids: tuple[int, ...]
    max_batch: int
    state: InstanceState = InstanceState.STARTING
    inflight: set[str] = field(default_factory=set)
    promote_ms: float = 0.0
    active_ms: float | None = None
    startup_stall_ms: float = 0.0


def required_prewarm_layers(
    spec: ModelSpec, bandwidth: float, ref_input_tokens: int = 512
) -> int:
    """Smallest prewarmed prefix k such that streaming the remaining layers
    never stalls the forward pass.

    Per-layer load time comes from the partition split; per-layer compute time
    from the prefill coefficients at a reference prompt length. Requires, for
    every l > k, load(k+1..l) <= compute(1..l-1). Returns the full layer count
    when no smaller k works.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    t_load = spec.layer_bytes / bandwidth
    t_comp = (spec.prefill_a_ms * ref_input_tokens + spec.prefill_b_ms) / spec.layers
    for k in range(1, spec.layers):
        ok = all(
            (l - k) * t_load <= (l - 1) * t_comp for l in range(k + 1, spec.layers + 1)
        )
        if ok:
            return k
    return spec.layers


def catchup_stall_ms(
    spec: ModelSpec, layers_loaded: int, bandwidth: float, ref_input_tokens: int = 512
) -> float:
    """First-token delay when starting inference with fewer layers than the
    stall-free prefix: the worst lag of the streaming load behind compute."""
    if layers_loaded >= spec.layers:
        return 0.0
    t_load = spec.layer_bytes / bandwidth
    t_comp = (spec.prefill_a_ms * ref_input_tokens + spec.prefill_b_ms) / spec.layers
    m = layers_loaded
    worst = max(
        (l - m) * t_load - (l - 1) * t_comp for l in range(m + 1, spec.layers + 1)
    )
    return max(0.0, worst)


def reservation_target(
    kv_capacity_bytes: float, max_batch: int, inflight: int, kv_used_bytes: float
) -> float:
    """GPU memory to keep reserved as KV cache while an instance drains:
    max(M*R/C, K + M/C)."""
    if not 0 <= inflight <= max_batch:
        raise ValueError(f"inflight {inflight} outside [0, {max_batch}]")
    if not 0 <= kv_used_bytes <= kv_capacity_bytes:
        raise ValueError(
            f"kv_used {kv_used_bytes} outside [0, {kv_capacity_bytes}]"
        )
    m, c, r, k = kv_capacity_bytes, max_batch, inflight, kv_used_bytes
    return max(m * r / c, k + m / c)


class Cluster:
    """Owns all GPU workers and instances; single-writer mutation."""

    def __init__(
        self,
        n_servers: int,
        gpus_per_server: int,
        pages_per_gpu: int,
        page_size: int,
        bandwidth: float,
    ):
        if n_servers < 1 or gpus_per_server < 1:
            raise ValueError("cluster needs at least one server and one GPU")
        self.page_size = page_size
        self.bandwidth = bandwidth
        self.gpus: list[GpuWorker] = []
        for s in range(n_servers):
            for g in range(gpus_per_server):
                self.gpus.append(
                    GpuWorker(
                        gpu_id=s * gpus_per_server + g,
                        server_id=s,
                        total_pages=pages_per_gpu,
                        page_size=page_size,
                    )
                )
        self.instances: dict[int, Instance] = {}
        self._next_slot = 0
        self._next_instance = 0
        # Hook for the engine's role timeline: fn(gpu, old_role, new_role).
        self.role_observer = None

    def gpu(self, gpu_id: int) -> GpuWorker:
        return self.gpus[gpu_id]

    def _set_role(self, gpu: GpuWorker, new: Role) -> None:
        old = gpu.role
        if old == new:
            return
        if (old, new) not in LEGAL_ROLE_TRANSITIONS:
            raise IllegalTransition(f"gpu {gpu.gpu_id}: {old.value} -> {new.value}")
        gpu.role = new
        if self.role_observer is not None:
            self.role_observer(gpu, old, new)

    def begin_prewarm(
        self, gpu: GpuWorker, spec: ModelSpec, pages: int, required_layers: int
    ) -> PrewarmSlot:
        """Create a prewarm slot on an idle, universal, or draining worker.

        Page accounting happens here; the engine schedules the actual weight
        transfer through the memory-switch pipeline.
        """
        if gpu.role == Role.DEDICATED:
            raise ClusterError(f"gpu {gpu.gpu_id} is dedicated; cannot prewarm")
        if spec.model_id in gpu.slots:
            raise ClusterError(
                f"gpu {gpu.gpu_id} already holds a slot for {spec.model_id}"
            )
        if pages > gpu.free_pages:
            raise ClusterError(
                f"gpu {gpu.gpu_id}: insufficient pages "
                f"(need {pages}, free {gpu.free_pages})"
            )
        slot = PrewarmSlot(
            slot_id=self._next_slot,
            model_id=spec.model_id,
            mapped_pages=pages,
            required_prewarm_layers=required_layers,
        )
        self._next_slot += 1
        gpu.slots[spec.model_id] = slot
        if gpu.role == Role.IDLE:
            self._set_role(gpu, Role.UNIVERSAL)
        return slot

    def evict_slot(self, gpu: GpuWorker, model_id: str) -> PrewarmSlot | None:
        """Drop a model's slot from one worker; a universal worker left with
        no slots goes idle."""
        slot = gpu.slots.get(model_id)
        if slot is None:
            return None
        if slot.active:
            raise ClusterError(
                f"gpu {gpu.gpu_id}: cannot evict active slot for {model_id}"
            )
        del gpu.slots[model_id]
        if gpu.role == Role.UNIVERSAL and not gpu.slots:
            self._set_role(gpu, Role.IDLE)
        return slot

    def promote_to_dedicated(
        self, gpu_ids: tuple[int, ...], spec: ModelSpec, required_layers: int
    ) -> tuple[Instance, list[tuple[int, str]]]:
        """Convert a group of workers into a dedicated instance for a model.

        Every worker must either hold the model's slot or be idle (cold path).
        All other slots are evicted and returned so the caller can invalidate
        their replicas cluster-wide; remaining pages are mapped as KV cache.
        """
        gpus = [self.gpu(g) for g in gpu_ids]
        if len(gpu_ids) != spec.parallelism:
            raise ClusterError(
                f"{spec.model_id} needs {spec.parallelism} GPUs, got {len(gpu_ids)}"
            )
        if len({g.server_id for g in gpus}) != 1:
            raise ClusterError("instance GPUs must reside on one server")
        for g in gpus:
            if g.role in (Role.DEDICATED, Role.DEDICATED_GRACE):
                raise ClusterError(
                    f"gpu {g.gpu_id} is dedicated to instance {g.instance_id}"
                )
            if g.role == Role.UNIVERSAL and spec.model_id not in g.slots:
                raise ClusterError(
                    f"gpu {g.gpu_id} holds no slot for {spec.model_id} and is not idle"
                )
        partition_pages = spec.partition_pages(self.page_size)
        evicted: list[tuple[int, str]] = []
        inst = Instance(
            instance_id=self._next_instance,
            model_id=spec.model_id,
            gpu_ids=tuple(gpu_ids),
            max_batch=spec.max_batch,
        )
        self._next_instance += 1
        for g in gpus:
            for other in [m for m in g.slots if m != spec.model_id]:
                self.evict_slot(g, other)
                evicted.append((g.gpu_id, other))
            slot = g.slots.get(spec.model_id)
            if slot is None:
                slot = self.begin_prewarm(g, spec, partition_pages, required_layers)
            slot.active = True
            g.kv_capacity_pages = g.total_pages - slot.mapped_pages
            if g.kv_capacity_pages <= 0:
                raise ClusterError(
                    f"gpu {g.gpu_id}: weights leave no pages for KV cache"
                )
            g.kv_pages_mapped = g.kv_capacity_pages
            g.instance_id = inst.instance_id
            self._set_role(g, Role.DEDICATED)
        self.instances[inst.instance_id] = inst
        return inst, evicted

    def enter_grace(self, inst: Instance) -> None:
        if inst.state not in (InstanceState.ACTIVE, InstanceState.STARTING):
            raise ClusterError(f"instance {inst.instance_id} not active")
        inst.state = InstanceState.GRACE
        for gid in inst.gpu_ids:
            self._set_role(self.gpu(gid), Role.DEDICATED_GRACE)

    def reclaim_on_completion(
        self, gpu: GpuWorker, inflight: int, max_batch: int, kv_used_bytes: float
    ) -> int:
        """Shrink a draining worker's mapped KV toward the reservation target;
        returns freed bytes (whole pages)."""
        if gpu.role != Role.DEDICATED_GRACE:
            raise ClusterError(f"gpu {gpu.gpu_id} is not draining")
        capacity = gpu.kv_capacity_pages * self.page_size
        used = min(kv_used_bytes, capacity)
        gpu.kv_pages_used = int(math.ceil(used / self.page_size))
        target = reservation_target(capacity, max_batch, inflight, used)
        reserved = gpu.kv_pages_mapped * self.page_size
        freed_pages = max(0, int(math.floor((reserved - target) / self.page_size)))
        gpu.kv_pages_mapped -= freed_pages
        return freed_pages * self.page_size

    def release_instance(self, inst: Instance) -> list[GpuWorker]:
        """Finish a grace period: unmap KV, keep the served model's slot plus
        any proactively prewarmed slots, and return the workers as universal."""
        if inst.state != InstanceState.GRACE:
            raise ClusterError(f"instance {inst.instance_id} is not in grace")
        if inst.inflight:
            raise ClusterError(
                f"instance {inst.instance_id} still has {len(inst.inflight)} inflight"
            )
        gpus = [self.gpu(g) for g in inst.gpu_ids]
        for g in gpus:
            g.kv_pages_mapped = 0
            g.kv_pages_used = 0
            g.kv_capacity_pages = 0
            g.instance_id = None
            slot = g.slots.get(inst.model_id)
            if slot is not None:
                slot.active = False
            self._set_role(g, Role.UNIVERSAL)
        inst.state = InstanceState.TERMINATED
        return gpus

    def check_invariants(self) -> list[str]:
        problems: list[str] = []
        for g in self.gpus:
            if g.slot_pages + g.kv_pages_mapped > g.total_pages:
                problems.append(
                    f"gpu {g.gpu_id}: pages over capacity "
                    f"({g.slot_pages}+{g.kv_pages_mapped}>{g.total_pages})"
                )
            active = [s for s in g.slots.values() if s.active]
            if g.role == Role.IDLE and (g.slots or g.kv_pages_mapped):
                problems.append(f"gpu {g.gpu_id}: idle but holds slots or KV")
            if g.role in (Role.DEDICATED, Role.DEDICATED_GRACE):
                if len(active) != 1:
                    problems.append(
                        f"gpu {g.gpu_id}: {g.role.value} with {len(active)} active slots"
                    )
                if g.kv_pages_mapped <= 0 and g.role == Role.DEDICATED:
                    problems.append(f"gpu {g.gpu_id}: dedicated with no KV mapped")
            else:
                if active:
                    problems.append(
                        f"gpu {g.gpu_id}: {g.role.value} with an active slot"
                    )
            for s in g.slots.values():
                if s.weight_bytes_loaded > s.mapped_pages * g.page_size + 1e-6:
                    problems.append(
                        f"gpu {g.gpu_id}: slot {s.model_id} loaded beyond mapping"
                    )
        for inst in self.instances.values():
            if inst.state == InstanceState.TERMINATED:
                continue
            if len(inst.inflight) > inst.max_batch:
                problems.append(
                    f"instance {inst.instance_id}: inflight exceeds batch capacity"
                )
            servers = {self.gpu(g).server_id for g in inst.gpu_ids}
            if len(servers) != 1:
                problems.append(f"instance {inst.instance_id}: spans servers")
        return problems
