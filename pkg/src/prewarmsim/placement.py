"""Replica counting, prewarming scores, the nested-or-disjoint placement
rule, the evict-aware placement pass, and eviction victim selection.

Planning is a pure function over a cluster snapshot. Two GPU groups may
coexist only if they are disjoint or one contains the other; partial overlap
is forbidden because promoting any member GPU would invalidate both replicas.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Mapping, Sequence

from .cluster import ModelSpec


class Category(IntEnum):
    BASIC = 0
    BURST = 1


class ReplicaStatus(str, Enum):
    PLANNED = "planned"
    LOADING = "loading"
    READY = "ready"
    INVALIDATED = "invalidated"
    CONSUMED = "consumed"


@dataclass
class Replica:
    """A prewarm target: one potential warm instance of a model.

    Replicas retained from released instances carry score 0.0 and evict first;
    scored replicas always have positive scores.
    """

    replica_id: int
    model_id: str
    category: Category
    rank: int
    score: float
    gpu_group: frozenset[int] | None = None
    status: ReplicaStatus = ReplicaStatus.PLANNED

    def __post_init__(self):
        if self.score < 0:
            raise ValueError("replica score must be >= 0")


@dataclass(frozen=True)
class GpuView:
    gpu_id: int
    server_id: int
    free_pages: int
    eligible: bool  # idle, universal, or draining


@dataclass(frozen=True)
class ClusterSnapshot:
    gpus: tuple[GpuView, ...]
    page_size: int


@dataclass(frozen=True)
class Assignment:
    replica: Replica
    gpu_group: tuple[int, ...]


@dataclass
class PlacementPlan:
    assignments: list[Assignment] = field(default_factory=list)
    skipped: list[tuple[Replica, str]] = field(default_factory=list)


def replica_counts(
    active: int, batch: int, avg_load: float, peak_load: float
) -> tuple[int, int]:
    """Basic replicas fill the gap to the predicted average load; burst
    replicas extend coverage to the predicted peak."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if active < 0:
        raise ValueError("active must be >= 0")
    if not 0 <= avg_load <= peak_load:
        raise ValueError(f"need 0 <= avg ({avg_load}) <= peak ({peak_load})")
    n_basic = max(math.ceil(avg_load / batch) - active, 0)
    n_burst = max(math.ceil(peak_load / batch) - n_basic - active, 0)
    return n_basic, n_burst


def prewarm_score(
    category: Category,
    rank: int,
    n_basic: int,
    n_burst: int,
    cold_load_ms: float,
    avg_load: float,
    peak_load: float,
    burstiness_cap: float = 10.0,
) -> float:
    """Replica priority: exponentially decaying utility weighted by the
    model's cold-load latency; burst replicas also scale with the predicted
    spike relative to the average."""
    total = n_basic + n_burst
    if total < 1:
        raise ValueError("need at least one replica to score")
    if rank < 0:
        raise ValueError("rank is zero-indexed")
    if category == Category.BASIC:
        return math.exp(-rank / total) * cold_load_ms
    if avg_load > 0:
        burstiness = min((peak_load - avg_load) / avg_load, burstiness_cap)
    else:
        burstiness = burstiness_cap
    return math.exp(-(n_basic + rank) / total) * cold_load_ms * burstiness


def validate_group(candidate: Iterable[int], existing: Iterable[Iterable[int]]) -> bool:
    """True iff the candidate is disjoint from, contains, or is contained in
    every existing group."""
    cand = frozenset(candidate)
    if not cand:
        return False
    for group in existing:
        g = frozenset(group)
        inter = cand & g
        if inter and not (cand <= g or g <= cand):
            return False
    return True


def sort_replicas(replicas: Sequence[Replica]) -> list[Replica]:
    """Planning order: all basic before all burst, then score descending;
    ties broken by model id and rank for determinism."""
    return sorted(
        replicas, key=lambda r: (r.category, -r.score, r.model_id, r.rank)
    )


def candidate_groups(
    snapshot: ClusterSnapshot,
    parallelism: int,
    need_pages: int,
    ledger: Mapping[int, int],
    existing_groups: Sequence[frozenset[int]],
    blocked: frozenset[int] = frozenset(),
) -> list[tuple[int, ...]]:
    """Valid same-server groups for one replica: contiguous GPU-id windows
    first, arbitrary combinations only when no window validates.

    ``blocked`` holds GPUs that already carry this model (a GPU has at most
    one slot per model, so same-model replicas need disjoint GPU sets).
    """
    by_server: dict[int, list[GpuView]] = {}
    for view in snapshot.gpus:
        by_server.setdefault(view.server_id, []).append(view)

    def fits(view: GpuView) -> bool:
        return (
            view.eligible
            and view.gpu_id not in blocked
            and ledger[view.gpu_id] >= need_pages
        )

    contiguous: list[tuple[int, ...]] = []
    for server_id in sorted(by_server):
        views = sorted(by_server[server_id], key=lambda v: v.gpu_id)
        for start in range(len(views) - parallelism + 1):
            window = views[start : start + parallelism]
            ids = tuple(v.gpu_id for v in window)
            if ids[-1] - ids[0] != parallelism - 1:
                continue  # hole in the id range
            if all(fits(v) for v in window) and validate_group(ids, existing_groups):
                contiguous.append(ids)
    if contiguous:
        return contiguous

    combos: list[tuple[int, ...]] = []
    for server_id in sorted(by_server):
        eligible = sorted(
            (v for v in by_server[server_id] if fits(v)), key=lambda v: v.gpu_id
        )
        for combo in itertools.combinations(eligible, parallelism):
            ids = tuple(v.gpu_id for v in combo)
            if validate_group(ids, existing_groups):
                combos.append(ids)
    return combos


def _overlap_stats(
    group: tuple[int, ...], live: Sequence[tuple[frozenset[int], float]]
) -> tuple[float, float, int]:
    """(H_g, S_g, count): highest and summed scores of replicas overlapping
    the group. H_g is -1 when nothing overlaps so empty groups always pass
    the isolation preference."""
    gset = frozenset(group)
    scores = [score for grp, score in live if grp & gset]
    if not scores:
        return -1.0, 0.0, 0
    return max(scores), sum(scores), len(scores)


def plan_placement(
    replicas: Sequence[Replica],
    snapshot: ClusterSnapshot,
    existing: Sequence[Replica],
    specs: Mapping[str, ModelSpec],
) -> PlacementPlan:
    """Greedy evict-aware placement.

    Replicas are processed basic-first then by descending score. For each, the
    valid groups are ranked by preferring groups whose overlapped replicas all
    score below the new replica, then by minimal overlapped-score sum; ties
    break on fewest overlapped replicas and lowest GPU ids. Skips are recorded,
    never raised, and the per-GPU memory ledger is updated after each
    assignment.
    """
    ledger = {v.gpu_id: v.free_pages for v in snapshot.gpus}
    live: list[tuple[frozenset[int], float]] = [
        (r.gpu_group, r.score) for r in existing if r.gpu_group
    ]
    model_gpus: dict[str, set[int]] = {}
    for r in existing:
        if r.gpu_group:
            model_gpus.setdefault(r.model_id, set()).update(r.gpu_group)
    plan = PlacementPlan()
    for replica in sort_replicas(replicas):
        spec = specs[replica.model_id]
        need_pages = spec.partition_pages(snapshot.page_size)
        groups = candidate_groups(
            snapshot,
            spec.parallelism,
            need_pages,
            ledger,
            [grp for grp, _ in live],
            blocked=frozenset(model_gpus.get(replica.model_id, ())),
        )
        if not groups:
            plan.skipped.append((replica, "no_valid_group"))
            continue
        ranked = []
        for g in groups:
            h_g, s_g, n_over = _overlap_stats(g, live)
            ranked.append((g, h_g, s_g, n_over))
        preferred = [entry for entry in ranked if entry[1] < replica.score]
        pool = preferred if preferred else ranked
        group, _, _, _ = min(pool, key=lambda e: (e[2], e[3], e[0]))
        plan.assignments.append(Assignment(replica, group))
        for gid in group:
            ledger[gid] -= need_pages
            if ledger[gid] < 0:
                raise AssertionError(f"memory ledger negative on gpu {gid}")
        live.append((frozenset(group), replica.score))
        model_gpus.setdefault(replica.model_id, set()).update(group)
    return plan


def choose_eviction_victims(
    target_group: Iterable[int], replicas: Sequence[Replica]
) -> list[Replica]:
    """All live replicas whose groups intersect the target group; every one
    must be invalidated cluster-wide if the group is taken."""
    gset = frozenset(target_group)
    return [
        r
        for r in replicas
        if r.gpu_group
        and r.status in (ReplicaStatus.LOADING, ReplicaStatus.READY)
        and r.gpu_group & gset
    ]


def choose_warm_group(
    replicas: Sequence[Replica],
    model_id: str,
    consumable=lambda replica: True,
) -> tuple[Replica, list[Replica]] | None:
    """Cheapest prewarmed replica of a model to consume for a new instance:
    minimal summed score of the other replicas its group would invalidate,
    ties broken on fewest victims then lowest GPU ids."""
    candidates = []
    for r in replicas:
        if r.model_id != model_id or r.gpu_group is None:
            continue
        if r.status not in (ReplicaStatus.LOADING, ReplicaStatus.READY):
            continue
        if not consumable(r):
            continue
        victims = [
            v for v in choose_eviction_victims(r.gpu_group, replicas) if v is not r
        ]
        cost = sum(v.score for v in victims)
        waste = sum(len(v.gpu_group) for v in victims)
        candidates.append(
            ((cost, waste, tuple(sorted(r.gpu_group))), r, victims)
        )
    if not candidates:
        return None
    _, replica, victims = min(candidates, key=lambda c: c[0])
    return replica, victims


def choose_launch_group(
    claimable_by_server: Mapping[int, Sequence[int]],
    parallelism: int,
    replicas: Sequence[Replica],
) -> tuple[tuple[int, ...], list[Replica]] | None:
    """Cold-start group over claimable (idle or universal) workers.

    Overlapped replicas are invalidated wholesale, so every same-server
    combination is legal; the pick minimizes the evicted score sum, breaking
    ties on the total prewarmed GPUs the grab would waste."""
    best = None
    for server_id in sorted(claimable_by_server):
        ids = sorted(claimable_by_server[server_id])
        if len(ids) < parallelism:
            continue
        for combo in itertools.combinations(ids, parallelism):
            victims = choose_eviction_victims(combo, replicas)
            cost = sum(v.score for v in victims)
            waste = sum(len(v.gpu_group) for v in victims)
            key = (cost, waste, combo)
            if best is None or key < best[0]:
                best = (key, combo, victims)
    if best is None:
        return None
    return best[1], best[2]
