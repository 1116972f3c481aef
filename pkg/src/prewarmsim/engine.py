"""Deterministic discrete-event simulation: request lifecycle, instance
startup latencies, prewarm planning, and the three serving policies.

Events are processed in (time, sequence) order; sequence numbers are assigned
at insertion so equal-time events resolve by causal order. All state is owned
by one Simulation and mutated only from its handlers, which makes repeated
runs with the same config and seed byte-identical.

Policies:
  warmserve  - predictor-driven prewarming, evict-aware placement, proactive
               prewarming onto draining workers.
  sllm_gpu   - weights stay resident on released GPUs until reallocated; no
               prediction, no proactive prewarming.
  no_prewarm - released GPUs drop all weights; every scale-up is cold.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum

from . import config as config_mod
from . import trace as trace_mod
from .autoscaler import ModelRouter
from .cluster import (
    Cluster,
    Instance,
    InstanceState,
    ModelSpec,
    PrewarmSlot,
    Role,
    required_prewarm_layers,
    catchup_stall_ms,
)
from .memswitch import MappingOp, background_kv_mapping, pipelined_load, unmap_cost_ms
from .metrics import MetricsReport, RequestRecord
from .placement import (
    Category,
    ClusterSnapshot,
    GpuView,
    Replica,
    ReplicaStatus,
    choose_launch_group,
    choose_warm_group,
    plan_placement,
    prewarm_score,
    replica_counts,
)
from .predictor import ColdPredictorError, LoadPredictor

WARMSERVE = "warmserve"
SLLM_GPU = "sllm_gpu"
NO_PREWARM = "no_prewarm"


class EventKind(str, Enum):
    ARRIVAL = "arrival"
    PREFILL_DONE = "prefill_done"
    REQUEST_DONE = "request_done"
    WINDOW_BOUNDARY = "window_boundary"
    SCALER_TICK = "scaler_tick"
    LOAD_DONE = "load_done"
    GRACE_RELEASE = "grace_release"
    MAP_DONE = "map_done"


@dataclass(frozen=True)
class Event:
    time: float
    seq: int
    kind: EventKind
    payload: tuple


class EventQueue:
    def __init__(self):
        self._heap: list[tuple[float, int, Event]] = []
        self._seq = 0

    def push(self, time: float, kind: EventKind, payload: tuple = ()) -> None:
        ev = Event(time, self._seq, kind, payload)
        heapq.heappush(self._heap, (time, self._seq, ev))
        self._seq += 1

    def pop(self) -> Event:
        return heapq.heappop(self._heap)[2]

    def __bool__(self) -> bool:
        return bool(self._heap)

    def peek_time(self) -> float:
        return self._heap[0][0]


class LatencyModel:
    """Per-request latency components from config coefficients."""

    def __init__(self, cfg: config_mod.LatencyConfig, interconnect_sync_ms: float = 0.0):
        self.warm_start_ms = cfg.warm_start_ms
        self.cold_extra_ms = cfg.cold_extra_ms
        self.gamma = cfg.decode_batch_slowdown
        self.speed = cfg.speed_factor
        self.sync_ms = interconnect_sync_ms

    def prefill_ms(self, spec: ModelSpec, input_tokens: int) -> float:
        return (spec.prefill_a_ms * input_tokens + spec.prefill_b_ms) / self.speed

    def tpot_ms(self, spec: ModelSpec, concurrent: int) -> float:
        slow = 1.0 + self.gamma * max(0, concurrent - 1)
        sync = self.sync_ms if spec.parallelism > 1 else 0.0
        return (spec.decode_c_ms * slow + sync) / self.speed

    def decode_rate_tokens_per_ms(self, spec: ModelSpec) -> float:
        return spec.max_batch / (spec.decode_c_ms / self.speed)


@dataclass
class RequestState:
    req: trace_mod.Request
    record: RequestRecord
    instance_id: int | None = None
    prefill_start: float | None = None
    first_token: float | None = None
    tpot: float = 0.0


@dataclass
class WindowTracker:
    count: int = 0
    integral: float = 0.0
    peak: int = 0
    last_t: float = 0.0

    def _advance(self, t: float) -> None:
        self.integral += self.count * (t - self.last_t)
        self.last_t = t

    def arrive(self, t: float) -> None:
        self._advance(t)
        self.count += 1
        if self.count > self.peak:
            self.peak = self.count

    def depart(self, t: float) -> None:
        self._advance(t)
        self.count -= 1

    def close(self, boundary: float, window_ms: float) -> tuple[float, int]:
        self._advance(boundary)
        avg = self.integral / window_ms
        peak = self.peak
        self.integral = 0.0
        self.peak = self.count
        return avg, peak


@dataclass
class ScaleUpDecision:
    model_id: str
    group: tuple[int, ...]
    warm: bool
    replica: Replica | None = None
    victims: list[Replica] = field(default_factory=list)


class Simulation:
    def __init__(
        self,
        cfg: config_mod.ExperimentConfig,
        requests: list[trace_mod.Request],
        policy: str | None = None,
    ):
        self.cfg = cfg
        self.policy = policy or cfg.policy
        if self.policy not in config_mod.POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        self.requests = requests
        self.specs = {m.model_id: m for m in cfg.models}
        unknown = {r.model_id for r in requests} - set(self.specs)
        if unknown:
            raise config_mod.ConfigError(
                f"trace references models missing from the config: {sorted(unknown)}"
            )
        cl = cfg.cluster
        self.bandwidth = cl.bandwidth_bytes_per_ms
        self.page_size = cl.page_size_bytes
        self.mu = cl.map_ms_per_page
        self.chunk_pages = cl.chunk_pages
        self.cluster = Cluster(
            cl.servers, cl.gpus_per_server, cl.pages_per_gpu, cl.page_size_bytes,
            self.bandwidth,
        )
        self.cluster.role_observer = self._on_role_change
        self.latency = LatencyModel(cfg.latency, cl.interconnect_sync_ms)
        self.required_layers = {
            mid: required_prewarm_layers(spec, self.bandwidth, cfg.latency.ref_input_tokens)
            for mid, spec in self.specs.items()
        }
        self.routers = {
            mid: ModelRouter(mid, spec.max_batch) for mid, spec in self.specs.items()
        }
        self.trackers = {mid: WindowTracker() for mid in self.specs}
        self.predictors: dict[tuple[str, str], LoadPredictor] = {}
        if self.policy == WARMSERVE:
            p = cfg.predictor
            for mid in self.specs:
                for target in ("average", "peak"):
                    self.predictors[(mid, target)] = LoadPredictor(
                        mid,
                        cfg.windows_per_day,
                        p.seasonal_days,
                        p.lookback_windows,
                        p.weight_orientation,
                        target,
                    )
        self.replicas: list[Replica] = []
        self._replica_seq = 0
        self.pcie_free = {g.gpu_id: 0.0 for g in self.cluster.gpus}
        self.map_free = {g.gpu_id: 0.0 for g in self.cluster.gpus}
        self.rstates: dict[str, RequestState] = {}
        self.latest_pred: dict[str, tuple[float, float] | None] = {}
        self.pending_pred: dict[tuple[str, str], dict] = {}
        self.events = EventQueue()
        self.now = 0.0
        self._window_idx = 0
        last_arrival = requests[-1].arrival if requests else 0.0
        self.end_time = last_arrival + cfg.sim.drain_timeout_ms
        self.report = MetricsReport(
            policy=self.policy,
            seed=cfg.seed,
            config=cfg.to_dict(),
            trace_hash=trace_mod.trace_hash(requests),
        )

    # ------------------------------------------------------------- lifecycle

    def run(self) -> MetricsReport:
        self._bootstrap()
        while self.events:
            if self.events.peek_time() > self.end_time:
                break
            ev = self.events.pop()
            if ev.time < self.now - 1e-9:
                raise AssertionError(
                    f"causality violation: event at {ev.time} before now {self.now}"
                )
            self.now = max(self.now, ev.time)
            self._dispatch(ev)
            if self.cfg.sim.invariant_checks:
                self._check_invariants()
        self._finalize()
        return self.report

    def _dispatch(self, ev: Event) -> None:
        if ev.kind == EventKind.ARRIVAL:
            self._handle_arrival(*ev.payload)
        elif ev.kind == EventKind.PREFILL_DONE:
            self._handle_prefill_done(*ev.payload)
        elif ev.kind == EventKind.REQUEST_DONE:
            self._handle_request_done(*ev.payload)
        elif ev.kind == EventKind.WINDOW_BOUNDARY:
            self._handle_window_boundary()
        elif ev.kind == EventKind.SCALER_TICK:
            self._handle_scaler_tick()
        elif ev.kind == EventKind.LOAD_DONE:
            self._handle_load_done(*ev.payload)
        elif ev.kind == EventKind.GRACE_RELEASE:
            self._handle_grace_release(*ev.payload)
        elif ev.kind == EventKind.MAP_DONE:
            pass  # background map-engine bookkeeping; provenance only

    def _bootstrap(self) -> None:
        for spec in self.cfg.models:
            for _ in range(spec.initial_instances):
                group = self._find_idle_group(spec.parallelism)
                if group is None:
                    raise config_mod.ConfigError(
                        f"models: no idle GPU group for initial instance of "
                        f"{spec.model_id}"
                    )
                inst, _ = self.cluster.promote_to_dedicated(
                    group, spec, self.required_layers[spec.model_id]
                )
                for gid in group:
                    slot = self.cluster.gpu(gid).slots[spec.model_id]
                    slot.layers_loaded = spec.layers
                    slot.weight_bytes_loaded = float(spec.partition_bytes)
                inst.state = InstanceState.ACTIVE
                inst.active_ms = 0.0
                self.routers[spec.model_id].add_instance(inst)
        for req in self.requests:
            self.events.push(req.arrival, EventKind.ARRIVAL, (req,))
        window_ms = self.cfg.predictor.window_ms
        if self.policy == WARMSERVE and window_ms <= self.end_time:
            self.events.push(window_ms, EventKind.WINDOW_BOUNDARY)
        tick = self.cfg.scaler.check_interval_ms
        if tick <= self.end_time:
            self.events.push(tick, EventKind.SCALER_TICK)

    def _finalize(self) -> None:
        self.report.undrained = sum(
            1 for rs in self.rstates.values() if rs.record.completion_ms is None
        )

    # ------------------------------------------------------------- requests

    def _handle_arrival(self, req: trace_mod.Request) -> None:
        rs = RequestState(
            req=req,
            record=RequestRecord(
                request_id=req.id,
                model_id=req.model_id,
                arrival_ms=req.arrival,
                output_tokens=req.output_tokens,
            ),
        )
        self.rstates[req.id] = rs
        self.report.records.append(rs.record)
        self.trackers[req.model_id].arrive(self.now)
        router = self.routers[req.model_id]
        inst = router.route(req.id)
        if inst is not None:
            self._admit(rs, inst, self.now, activation=False)
        else:
            router.queue.append(req.id)
            self._maybe_scale_up(req.model_id, cause="queued_request")

    def _admit(
        self, rs: RequestState, inst: Instance, t: float, activation: bool
    ) -> None:
        spec = self.specs[rs.req.model_id]
        inst.inflight.add(rs.req.id)
        rs.instance_id = inst.instance_id
        arrival = rs.req.arrival
        if activation:
            waited_in_startup = t - max(arrival, inst.promote_ms)
            stall_share = min(inst.startup_stall_ms, waited_in_startup)
            rs.record.queue_ms = max(0.0, inst.promote_ms - arrival)
            rs.record.startup_ms = waited_in_startup - stall_share
            rs.record.load_stall_ms = stall_share
        else:
            rs.record.queue_ms = t - arrival
        prefill = self.latency.prefill_ms(spec, rs.req.input_tokens)
        rs.record.prefill_ms = prefill
        rs.prefill_start = t
        self.events.push(t + prefill, EventKind.PREFILL_DONE, (rs.req.id,))

    def _handle_prefill_done(self, request_id: str) -> None:
        rs = self.rstates[request_id]
        rs.first_token = self.now
        rs.record.first_token_ms = self.now
        inst = self.cluster.instances[rs.instance_id]
        spec = self.specs[rs.req.model_id]
        tpot = self.latency.tpot_ms(spec, len(inst.inflight))
        rs.tpot = tpot
        if rs.req.output_tokens >= 2:
            rs.record.tpot_ms = tpot
        done = self.now + (rs.req.output_tokens - 1) * tpot
        self.events.push(done, EventKind.REQUEST_DONE, (request_id,))

    def _handle_request_done(self, request_id: str) -> None:
        rs = self.rstates[request_id]
        inst = self.cluster.instances[rs.instance_id]
        self.trackers[rs.req.model_id].depart(self.now)
        inst.inflight.discard(request_id)
        rs.record.completion_ms = self.now
        router = self.routers[rs.req.model_id]
        if inst.state == InstanceState.GRACE:
            freed_any = False
            per_gpu_used = self._kv_used_bytes(inst) / len(inst.gpu_ids)
            for gid in inst.gpu_ids:
                freed = self.cluster.reclaim_on_completion(
                    self.cluster.gpu(gid), len(inst.inflight), inst.max_batch,
                    per_gpu_used,
                )
                if freed > 0:
                    freed_any = True
            if freed_any and self.policy == WARMSERVE:
                self._replan("kv_reclaimed")
            if not inst.inflight:
                self.events.push(
                    self.now, EventKind.GRACE_RELEASE, (inst.instance_id,)
                )
        elif inst.state == InstanceState.ACTIVE:
            while router.queue and len(inst.inflight) < inst.max_batch:
                nxt = router.queue.popleft()
                self._admit(self.rstates[nxt], inst, self.now, activation=False)

    def _kv_used_bytes(self, inst: Instance) -> float:
        spec = self.specs[inst.model_id]
        total_tokens = 0.0
        for rid in inst.inflight:
            rs = self.rstates[rid]
            tokens = rs.req.input_tokens
            if rs.first_token is not None:
                if rs.tpot > 0:
                    generated = math.floor((self.now - rs.first_token) / rs.tpot)
                else:
                    generated = rs.req.output_tokens - 1
                tokens += min(rs.req.output_tokens - 1, max(0, generated))
            total_tokens += tokens
        return total_tokens * spec.kv_bytes_per_token

    # ------------------------------------------------------------- scale up

    def _maybe_scale_up(self, model_id: str, cause: str) -> None:
        router = self.routers[model_id]
        while router.wanted_scale_ups() > 0:
            decision = self._choose_scale_up(model_id)
            if decision is None:
                self.report.capacity_starved += 1
                self.report.audit.append(
                    {
                        "kind": "scale_up_skipped",
                        "time_ms": self.now,
                        "model_id": model_id,
                        "cause": cause,
                        "reason": "no_gpu_group",
                    }
                )
                return
            self._execute_scale_up(decision, cause)

    def _slot_layers_at(self, slot: PrewarmSlot, spec: ModelSpec, t: float) -> int:
        if slot.load_finish is None or t >= slot.load_finish:
            return slot.layers_loaded
        if slot.load_start is None or t <= slot.load_start:
            return 0
        frac = (t - slot.load_start) / (slot.load_finish - slot.load_start)
        return min(spec.layers, int(frac * spec.partition_bytes // spec.layer_bytes))

    def _replica_consumable(self, replica: Replica) -> bool:
        """A replica is consumable once every worker in its group is
        universal and holds at least one loaded layer."""
        spec = self.specs[replica.model_id]
        for gid in replica.gpu_group:
            gpu = self.cluster.gpu(gid)
            if gpu.role != Role.UNIVERSAL:
                return False
            slot = gpu.slots.get(replica.model_id)
            if slot is None or self._slot_layers_at(slot, spec, self.now) < 1:
                return False
        return True

    def _choose_scale_up(self, model_id: str) -> ScaleUpDecision | None:
        """Warm start from this model's cheapest prewarmed replica group;
        otherwise claim idle or universal workers, minimizing the summed
        prewarming score of the replicas the grab would invalidate."""
        spec = self.specs[model_id]
        warm = choose_warm_group(self.replicas, model_id, self._replica_consumable)
        if warm is not None:
            replica, victims = warm
            return ScaleUpDecision(
                model_id, tuple(sorted(replica.gpu_group)), True, replica, victims
            )
        claimable: dict[int, list[int]] = {}
        for g in self.cluster.gpus:
            if g.role in (Role.IDLE, Role.UNIVERSAL):
                claimable.setdefault(g.server_id, []).append(g.gpu_id)
        cold = choose_launch_group(claimable, spec.parallelism, self.replicas)
        if cold is None:
            return None
        group, victims = cold
        return ScaleUpDecision(model_id, group, False, None, victims)

    def _find_idle_group(self, parallelism: int) -> tuple[int, ...] | None:
        by_server: dict[int, list[int]] = {}
        for g in self.cluster.gpus:
            if g.role == Role.IDLE:
                by_server.setdefault(g.server_id, []).append(g.gpu_id)
        # Contiguous id windows first, then any same-server combination.
        for server_id in sorted(by_server):
            ids = sorted(by_server[server_id])
            for i in range(len(ids) - parallelism + 1):
                window = ids[i : i + parallelism]
                if window[-1] - window[0] == parallelism - 1:
                    return tuple(window)
        for server_id in sorted(by_server):
            ids = sorted(by_server[server_id])
            if len(ids) >= parallelism:
                return tuple(ids[:parallelism])
        return None

    def _execute_scale_up(self, dec: ScaleUpDecision, cause: str) -> None:
        spec = self.specs[dec.model_id]
        required = self.required_layers[dec.model_id]
        if dec.warm:
            # Victim slots on the target group are dropped by the promotion
            # itself; invalidation cleans up the partitions elsewhere.
            for v in dec.victims:
                self._invalidate_replica(v, keep_gpus=set(dec.group))
        else:
            # Cold grab: clear the claimed workers first so they reach the
            # idle path of the promotion.
            for v in dec.victims:
                self._invalidate_replica(v, keep_gpus=set())
        inst, evicted_pairs = self.cluster.promote_to_dedicated(
            dec.group, spec, required
        )
        for gid, model_id in evicted_pairs:
            page_count = self.specs[model_id].partition_pages(self.page_size)
            self._book_unmap(gid, page_count, f"evict_{model_id}")
        if dec.replica is not None:
            dec.replica.status = ReplicaStatus.CONSUMED
        self.replicas = [
            r
            for r in self.replicas
            if r.status in (ReplicaStatus.READY, ReplicaStatus.LOADING)
        ]

        stall_ms = 0.0
        load_ms = 0.0
        if dec.warm:
            for gid in dec.group:
                slot = self.cluster.gpu(gid).slots[dec.model_id]
                layers = self._slot_layers_at(slot, spec, self.now)
                stall_ms = max(
                    stall_ms, catchup_stall_ms(
                        spec, layers, self.bandwidth,
                        self.cfg.latency.ref_input_tokens,
                    )
                )
        else:
            for gid in dec.group:
                slot = self.cluster.gpu(gid).slots[dec.model_id]
                start = max(self.now, self.pcie_free[gid])
                plan = pipelined_load(
                    spec.partition_bytes, self.bandwidth, self.mu,
                    self.chunk_pages, self.page_size,
                )
                finish = start + plan.finish_ms
                self.pcie_free[gid] = finish
                slot.load_start = start
                slot.load_finish = finish
                load_ms = max(load_ms, finish - self.now)
                self._record_pipeline(gid, "cold_load", start, plan)

        kv_stall = 0.0
        rate = (
            self.latency.decode_rate_tokens_per_ms(spec)
            * spec.kv_bytes_per_token
            / self.page_size
        )
        for gid in dec.group:
            gpu = self.cluster.gpu(gid)
            if self.mu > 0:
                kv_stall = max(
                    kv_stall,
                    background_kv_mapping(gpu.kv_capacity_pages, self.mu, rate),
                )
                busy_from = max(self.map_free[gid], self.now)
                self.map_free[gid] = busy_from + gpu.kv_capacity_pages * self.mu
                self.events.push(self.map_free[gid], EventKind.MAP_DONE, (gid, "kv_map"))

        startup = (
            self.latency.warm_start_ms
            + (0.0 if dec.warm else self.latency.cold_extra_ms)
            + load_ms
            + stall_ms
            + kv_stall
        )
        inst.promote_ms = self.now
        inst.startup_stall_ms = stall_ms + kv_stall
        inst.active_ms = self.now + startup
        self.routers[dec.model_id].add_instance(inst)
        self.events.push(
            inst.active_ms, EventKind.LOAD_DONE, ("instance", inst.instance_id)
        )
        self.report.scale_ups_total += 1
        if dec.warm:
            self.report.scale_ups_warm += 1
        else:
            self.report.scale_ups_cold += 1
        self.report.audit.append(
            {
                "kind": "scale_up",
                "time_ms": self.now,
                "model_id": dec.model_id,
                "cause": cause,
                "warm": dec.warm,
                "gpu_group": list(dec.group),
                "consumed_replica": None if dec.replica is None else dec.replica.replica_id,
                "victims": [
                    {"replica_id": v.replica_id, "model_id": v.model_id, "score": v.score}
                    for v in dec.victims
                ],
                "startup_ms": startup,
                "breakdown": {
                    "warm_start_ms": self.latency.warm_start_ms,
                    "cold_extra_ms": 0.0 if dec.warm else self.latency.cold_extra_ms,
                    "load_ms": load_ms,
                    "layer_stall_ms": stall_ms,
                    "kv_map_stall_ms": kv_stall,
                },
            }
        )

    def _invalidate_replica(self, replica: Replica, keep_gpus: set[int]) -> None:
        """Cluster-wide invalidation: free the replica's slots everywhere
        (promotion already dropped the ones on the target group)."""
        replica.status = ReplicaStatus.INVALIDATED
        if replica.gpu_group is None:
            return
        for gid in sorted(replica.gpu_group):
            if gid in keep_gpus:
                continue
            gpu = self.cluster.gpu(gid)
            slot = gpu.slots.get(replica.model_id)
            if slot is not None and not slot.active:
                self.cluster.evict_slot(gpu, replica.model_id)
                self._book_unmap(gid, slot.mapped_pages, "slot_evict")

    def _book_unmap(self, gpu_id: int, pages: int, why: str) -> None:
        if pages <= 0 or self.mu <= 0:
            return
        op = MappingOp(gpu_id, why, pages, "unmap", self.now, self.mu)
        busy_from = max(self.map_free[gpu_id], self.now)
        self.map_free[gpu_id] = busy_from + unmap_cost_ms(pages, self.mu)
        self.events.push(self.map_free[gpu_id], EventKind.MAP_DONE, (gpu_id, why))
        if self.cfg.sim.dump_pipeline_traces:
            self.report.pipeline_rows.append(
                {
                    "gpu_id": gpu_id,
                    "label": f"unmap_{why}",
                    "start_ms": busy_from,
                    "finish_ms": busy_from + op.duration_ms,
                    "n_chunks": 1,
                    "stall_ms": 0.0,
                }
            )

    def _settle_slot(self, slot: PrewarmSlot, spec: ModelSpec) -> None:
        """Fold a finished transfer into the slot's static fields."""
        if slot.load_finish is not None and self.now >= slot.load_finish:
            slot.layers_loaded = spec.layers
            slot.weight_bytes_loaded = float(spec.partition_bytes)
            slot.load_start = None
            slot.load_finish = None

    def _handle_load_done(self, kind: str, *args) -> None:
        if kind == "instance":
            (instance_id,) = args
            inst = self.cluster.instances[instance_id]
            if inst.state != InstanceState.STARTING:
                return
            inst.state = InstanceState.ACTIVE
            spec = self.specs[inst.model_id]
            for gid in inst.gpu_ids:
                self._settle_slot(self.cluster.gpu(gid).slots[inst.model_id], spec)
            router = self.routers[inst.model_id]
            while router.queue and len(inst.inflight) < inst.max_batch:
                rid = router.queue.popleft()
                self._admit(self.rstates[rid], inst, self.now, activation=True)
            if router.queue:
                self._maybe_scale_up(inst.model_id, cause="queued_after_activation")
        else:
            replica_id, gpu_id, slot_id, stage = args
            replica = next(
                (r for r in self.replicas if r.replica_id == replica_id), None
            )
            if replica is None or replica.status != ReplicaStatus.LOADING:
                return
            gpu = self.cluster.gpu(gpu_id)
            slot = gpu.slots.get(replica.model_id)
            if slot is None or slot.slot_id != slot_id:
                return
            spec = self.specs[replica.model_id]
            if stage == "full":
                slot.layers_loaded = spec.layers
                slot.weight_bytes_loaded = float(spec.partition_bytes)
            else:
                slot.layers_loaded = max(
                    slot.layers_loaded, slot.required_prewarm_layers
                )
                slot.weight_bytes_loaded = max(
                    slot.weight_bytes_loaded,
                    slot.required_prewarm_layers * spec.layer_bytes,
                )
            if all(
                self.cluster.gpu(g).slots[replica.model_id].layers_loaded
                >= self.required_layers[replica.model_id]
                for g in replica.gpu_group
            ):
                replica.status = ReplicaStatus.READY

    # ------------------------------------------------------------- scaling down

    def _handle_scaler_tick(self) -> None:
        any_grace = False
        for model_id in sorted(self.routers):
            router = self.routers[model_id]
            for inst in router.scale_down_check(self.cfg.scaler):
                self.cluster.enter_grace(inst)
                any_grace = True
                self.report.audit.append(
                    {
                        "kind": "scale_down",
                        "time_ms": self.now,
                        "model_id": model_id,
                        "instance_id": inst.instance_id,
                        "inflight": len(inst.inflight),
                    }
                )
                if not inst.inflight:
                    self.events.push(
                        self.now, EventKind.GRACE_RELEASE, (inst.instance_id,)
                    )
        if any_grace and self.policy == WARMSERVE:
            self._replan("grace_entered")
        next_tick = self.now + self.cfg.scaler.check_interval_ms
        if next_tick <= self.end_time:
            self.events.push(next_tick, EventKind.SCALER_TICK)

    def _handle_grace_release(self, instance_id: int) -> None:
        inst = self.cluster.instances[instance_id]
        if inst.state != InstanceState.GRACE or inst.inflight:
            return
        kv_pages = {gid: self.cluster.gpu(gid).kv_pages_mapped for gid in inst.gpu_ids}
        gpus = self.cluster.release_instance(inst)
        for gid, pages in kv_pages.items():
            self._book_unmap(gid, pages, "kv_unmap")
        if self.policy == NO_PREWARM:
            for gpu in gpus:
                for model_id in sorted(gpu.slots):
                    slot = self.cluster.evict_slot(gpu, model_id)
                    self._book_unmap(gpu.gpu_id, slot.mapped_pages, "slot_evict")
        else:
            spec = self.specs[inst.model_id]
            for gpu in gpus:
                slot = gpu.slots.get(inst.model_id)
                if slot is not None:
                    self._settle_slot(slot, spec)
            self.replicas.append(
                Replica(
                    replica_id=self._next_replica_id(),
                    model_id=inst.model_id,
                    category=Category.BASIC,
                    rank=0,
                    score=0.0,
                    gpu_group=frozenset(inst.gpu_ids),
                    status=ReplicaStatus.READY,
                )
            )
        for router in self.routers.values():
            router.prune_terminated()
        self.report.audit.append(
            {
                "kind": "release",
                "time_ms": self.now,
                "model_id": inst.model_id,
                "instance_id": inst.instance_id,
                "gpu_group": list(inst.gpu_ids),
            }
        )
        # Freed capacity: serve any starved queues first, then prewarm.
        for model_id in sorted(self.routers):
            if self.routers[model_id].queue:
                self._maybe_scale_up(model_id, cause="capacity_released")
        if self.policy == WARMSERVE:
            self._replan("instance_released")

    # ------------------------------------------------------------- prediction

    def _handle_window_boundary(self) -> None:
        window_ms = float(self.cfg.predictor.window_ms)
        boundary = (self._window_idx + 1) * window_ms
        wp = self.cfg.windows_per_day
        day, idx = divmod(self._window_idx, wp)
        next_day, next_idx = divmod(self._window_idx + 1, wp)
        for model_id in sorted(self.specs):
            avg, peak = self.trackers[model_id].close(boundary, window_ms)
            observed = {"average": avg, "peak": float(peak)}
            for target in ("average", "peak"):
                pred = self.predictors[(model_id, target)]
                pred.observe_value(day, idx, observed[target])
                pending = self.pending_pred.pop((model_id, target), None)
                if pending is not None:
                    pending["actual"] = observed[target]
                    self.report.prediction_rows.append(pending)
            try:
                row_by_target = {}
                for target in ("average", "peak"):
                    p = self.predictors[(model_id, target)].predict(next_day, next_idx)
                    row_by_target[target] = p
                    self.pending_pred[(model_id, target)] = {
                        "model_id": model_id,
                        "target": target,
                        "day": next_day,
                        "window": next_idx,
                        "seasonal": p.seasonal,
                        "delta": p.delta,
                        "predicted": p.predicted,
                        "actual": None,
                    }
                avg_hat = row_by_target["average"].predicted
                peak_hat = max(row_by_target["peak"].predicted, avg_hat)
                self.latest_pred[model_id] = (avg_hat, peak_hat)
            except ColdPredictorError:
                self.latest_pred[model_id] = None
        self._window_idx += 1
        self._replan("window_boundary")
        for model_id in sorted(self.routers):
            if self.routers[model_id].queue:
                self._maybe_scale_up(model_id, cause="window_retry")
        next_boundary = (self._window_idx + 1) * window_ms
        if next_boundary <= self.end_time:
            self.events.push(next_boundary, EventKind.WINDOW_BOUNDARY)

    # ------------------------------------------------------------- planning

    def _next_replica_id(self) -> int:
        rid = self._replica_seq
        self._replica_seq += 1
        return rid

    def _replan(self, cause: str) -> None:
        if self.policy != WARMSERVE:
            return
        new_replicas: list[Replica] = []
        for model_id in sorted(self.specs):
            pred = self.latest_pred.get(model_id)
            if pred is None:
                continue
            avg_hat, peak_hat = pred
            spec = self.specs[model_id]
            active = sum(
                1
                for i in self.routers[model_id].instances
                if i.state in (InstanceState.ACTIVE, InstanceState.STARTING)
            )
            n_basic, n_burst = replica_counts(
                active, spec.max_batch, avg_hat, peak_hat
            )
            total = n_basic + n_burst
            have = sum(
                1
                for r in self.replicas
                if r.model_id == model_id
                and r.status in (ReplicaStatus.LOADING, ReplicaStatus.READY)
            )
            if total <= have:
                continue
            cold_ms = spec.cold_load_latency(self.bandwidth)
            for pos in range(have, total):
                if pos < n_basic:
                    cat, rank = Category.BASIC, pos
                else:
                    cat, rank = Category.BURST, pos - n_basic
                score = prewarm_score(
                    cat, rank, n_basic, n_burst, cold_ms, avg_hat, peak_hat
                )
                new_replicas.append(
                    Replica(self._next_replica_id(), model_id, cat, rank, score)
                )
        if not new_replicas:
            return
        snapshot = ClusterSnapshot(
            gpus=tuple(
                GpuView(
                    gpu_id=g.gpu_id,
                    server_id=g.server_id,
                    free_pages=g.free_pages,
                    eligible=g.role in (Role.IDLE, Role.UNIVERSAL, Role.DEDICATED_GRACE),
                )
                for g in self.cluster.gpus
            ),
            page_size=self.page_size,
        )
        existing = [r for r in self.replicas if r.gpu_group]
        # Draining instances become retained replicas at release; protect
        # their future groups from partial overlap now.
        pseudo = [
            Replica(-1 - i.instance_id, i.model_id, Category.BASIC, 0, 0.0,
                    frozenset(i.gpu_ids), ReplicaStatus.READY)
            for i in self.cluster.instances.values()
            if i.state == InstanceState.GRACE
        ]
        plan = plan_placement(new_replicas, snapshot, existing + pseudo, self.specs)
        for assignment in plan.assignments:
            replica = assignment.replica
            spec = self.specs[replica.model_id]
            replica.gpu_group = frozenset(assignment.gpu_group)
            replica.status = ReplicaStatus.LOADING
            self.replicas.append(replica)
            pages = spec.partition_pages(self.page_size)
            for gid in assignment.gpu_group:
                gpu = self.cluster.gpu(gid)
                slot = self.cluster.begin_prewarm(
                    gpu, spec, pages, self.required_layers[replica.model_id]
                )
                start = max(self.now, self.pcie_free[gid], self.map_free[gid])
                tplan = pipelined_load(
                    spec.partition_bytes, self.bandwidth, self.mu,
                    self.chunk_pages, self.page_size,
                )
                finish = start + tplan.finish_ms
                self.pcie_free[gid] = finish
                slot.load_start = start
                slot.load_finish = finish
                ready_frac = min(
                    1.0,
                    self.required_layers[replica.model_id]
                    * spec.layer_bytes
                    / spec.partition_bytes,
                )
                ready_at = start + ready_frac * (finish - start)
                self.events.push(
                    ready_at,
                    EventKind.LOAD_DONE,
                    ("replica", replica.replica_id, gid, slot.slot_id, "ready"),
                )
                if finish > ready_at:
                    self.events.push(
                        finish,
                        EventKind.LOAD_DONE,
                        ("replica", replica.replica_id, gid, slot.slot_id, "full"),
                    )
                self._record_pipeline(gid, f"prewarm_{replica.model_id}", start, tplan)
        if plan.assignments or plan.skipped:
            self.report.audit.append(
                {
                    "kind": "prewarm_plan",
                    "time_ms": self.now,
                    "cause": cause,
                    "assignments": [
                        {
                            "replica_id": a.replica.replica_id,
                            "model_id": a.replica.model_id,
                            "category": a.replica.category.name.lower(),
                            "rank": a.replica.rank,
                            "score": a.replica.score,
                            "gpu_group": list(a.gpu_group),
                        }
                        for a in plan.assignments
                    ],
                    "skipped": [
                        {
                            "model_id": r.model_id,
                            "category": r.category.name.lower(),
                            "rank": r.rank,
                            "score": r.score,
                            "reason": reason,
                        }
                        for r, reason in plan.skipped
                    ],
                }
            )

    # ------------------------------------------------------------- bookkeeping

    def _record_pipeline(self, gpu_id, label, start, plan) -> None:
        if not self.cfg.sim.dump_pipeline_traces:
            return
        self.report.pipeline_rows.append(
            {
                "gpu_id": gpu_id,
                "label": label,
                "start_ms": start,
                "finish_ms": start + plan.finish_ms,
                "n_chunks": plan.n_chunks,
                "stall_ms": plan.critical_path_stall_ms,
            }
        )

    def _on_role_change(self, gpu, old: Role, new: Role) -> None:
        self.report.role_timeline.append(
            {
                "time_ms": self.now,
                "gpu_id": gpu.gpu_id,
                "old_role": old.value,
                "new_role": new.value,
            }
        )

    def _check_invariants(self) -> None:
        problems = self.cluster.check_invariants()
        for model_id, router in self.routers.items():
            if router.queue:
                for inst in router.active_instances():
                    if len(inst.inflight) < inst.max_batch:
                        problems.append(
                            f"work conservation: {model_id} queued while instance "
                            f"{inst.instance_id} has capacity"
                        )
                        break
        groups = [r.gpu_group for r in self.replicas if r.gpu_group]
        for i, a in enumerate(groups):
            for b in groups[i + 1 :]:
                inter = a & b
                if inter and not (a <= b or b <= a):
                    problems.append(f"partial overlap between replica groups {a} {b}")
        for p in problems:
            entry = f"t={self.now}: {p}"
            if entry not in self.report.invariant_violations:
                self.report.invariant_violations.append(entry)


def run(
    cfg: config_mod.ExperimentConfig,
    requests: list[trace_mod.Request] | None = None,
    policy: str | None = None,
) -> MetricsReport:
    """Run one deterministic simulation and return its metrics report."""
    if requests is None:
        requests = config_mod.materialize_trace(cfg)
    sim = Simulation(cfg, requests, policy)
    return sim.run()


def hit_ratio(report: MetricsReport) -> float | None:
    """Warm scale-ups over all scale-ups; None when nothing scaled up."""
    return report.hit_ratio
