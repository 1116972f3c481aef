"""Request routing, per-model queues, and the scale-down policy.

Routing is least-inflight with round-robin tie-breaking among active
instances; a model's queue preserves arrival order. Scale-down marks the
least-loaded instances for a grace period after utilization stays below a
threshold for a configured number of checks.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

from .cluster import Instance, InstanceState


@dataclass
class ScalePolicy:
    check_interval_ms: float = 10_000.0
    scale_down_utilization_threshold: float = 0.5
    sustain_windows: int = 3

    def __post_init__(self):
        if not 0 < self.scale_down_utilization_threshold < 1:
            raise ValueError("scale_down_utilization_threshold must be in (0, 1)")
        if self.check_interval_ms <= 0:
            raise ValueError("check_interval_ms must be > 0")
        if self.sustain_windows < 1:
            raise ValueError("sustain_windows must be >= 1")


class ModelRouter:
    """Routes one model's requests across its instances; queues the rest."""

    def __init__(self, model_id: str, max_batch: int):
        self.model_id = model_id
        self.max_batch = max_batch
        self.instances: list[Instance] = []
        self.queue: deque = deque()
        self._rr = 0
        self._below_count = 0

    def add_instance(self, inst: Instance) -> None:
        self.instances.append(inst)

    def active_instances(self) -> list[Instance]:
        return [i for i in self.instances if i.state == InstanceState.ACTIVE]

    def starting_instances(self) -> list[Instance]:
        return [i for i in self.instances if i.state == InstanceState.STARTING]

    def route(self, request_id: str) -> Instance | None:
        """Least-inflight active instance with spare batch capacity,
        round-robin among ties; None means the request must queue."""
        candidates = [
            i for i in self.active_instances() if len(i.inflight) < i.max_batch
        ]
        if not candidates:
            return None
        least = min(len(i.inflight) for i in candidates)
        tied = [i for i in candidates if len(i.inflight) == least]
        ordered = sorted(tied, key=lambda i: i.instance_id)
        chosen = ordered[self._rr % len(ordered)]
        self._rr += 1
        return chosen

    def utilization(self) -> float:
        active = self.active_instances()
        capacity = sum(i.max_batch for i in active)
        if capacity == 0:
            return 0.0
        return sum(len(i.inflight) for i in active) / capacity

    def scale_down_check(self, policy: ScalePolicy) -> list[Instance]:
        """Instances to drain this tick. Keeps max(1, ceil(load/B)) active
        unless the model is completely idle; resets the sustain counter after
        acting."""
        active = self.active_instances()
        if not active:
            self._below_count = 0
            return []
        if self.utilization() < policy.scale_down_utilization_threshold:
            self._below_count += 1
        else:
            self._below_count = 0
            return []
        if self._below_count < policy.sustain_windows:
            return []
        load = sum(len(i.inflight) for i in active)
        keep = 0 if load == 0 else max(1, math.ceil(load / self.max_batch))
        drain_n = len(active) - keep
        if drain_n <= 0:
            return []
        self._below_count = 0
        victims = sorted(active, key=lambda i: (len(i.inflight), i.instance_id))
        return victims[:drain_n]

    def wanted_scale_ups(self) -> int:
        """Reactive trigger: one starting instance per queued batch not yet
        covered by an instance already starting."""
        if not self.queue:
            return 0
        want = math.ceil(len(self.queue) / self.max_batch)
        return max(0, want - len(self.starting_instances()))

    def prune_terminated(self) -> None:
        self.instances = [
            i for i in self.instances if i.state != InstanceState.TERMINATED
        ]
