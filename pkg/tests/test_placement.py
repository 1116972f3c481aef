import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prewarmsim.cluster import ModelSpec
from prewarmsim.placement import (
    Category,
    ClusterSnapshot,
    GpuView,
    Replica,
    ReplicaStatus,
    choose_eviction_victims,
    plan_placement,
    prewarm_score,
    replica_counts,
    sort_replicas,
    validate_group,
)

from oracles import enumerate_valid_groups, select_group_oracle, victims_oracle


def view(gpu_id, server=0, free=100, eligible=True):
    return GpuView(gpu_id, server, free, eligible)


def snapshot(views):
    return ClusterSnapshot(gpus=tuple(views), page_size=1)


def replica(rid, model="m", cat=Category.BASIC, rank=0, score=1.0, group=None):
    return Replica(
        rid,
        model,
        cat,
        rank,
        score,
        None if group is None else frozenset(group),
        ReplicaStatus.READY if group is not None else ReplicaStatus.PLANNED,
    )


def spec(model="m", weight=10, parallelism=1):
    return ModelSpec(model, weight, parallelism, layers=4)


class TestReplicaCounts:
    def test_hand_example(self):
        # ceil(40/32) - 1 = 1 basic; ceil(100/32) - 1 - 1 = 2 burst
        assert replica_counts(1, 32, 40, 100) == (1, 2)

    def test_no_demand(self):
        assert replica_counts(0, 32, 0, 0) == (0, 0)

    def test_capacity_sufficient(self):
        assert replica_counts(4, 32, 40, 100) == (0, 0)

    def test_validation(self):
        with pytest.raises(ValueError):
            replica_counts(0, 0, 1, 1)
        with pytest.raises(ValueError):
            replica_counts(0, 32, 10, 5)

    def test_counts_cover_peak(self):
        for active in range(4):
            for avg, peak in ((0, 0), (10, 10), (31, 64), (64, 200), (5, 33)):
                nb, nu = replica_counts(active, 32, avg, peak)
                assert nb >= 0 and nu >= 0
                assert active + nb + nu >= math.ceil(peak / 32)


class TestPrewarmScore:
    def test_basic_rank_zero_equals_cold_latency(self):
        assert prewarm_score(Category.BASIC, 0, 1, 2, 10_000.0, 40, 100) == 10_000.0

    def test_burst_hand_example(self):
        # exp(-(1+0)/3) * 10000 * (100-40)/40
        got = prewarm_score(Category.BURST, 0, 1, 2, 10_000.0, 40, 100)
        assert got == pytest.approx(10747.969658606838, abs=1e-9)

    def test_burst_rank_one(self):
        got = prewarm_score(Category.BURST, 1, 1, 2, 10_000.0, 40, 100)
        assert got == pytest.approx(7701.25678548888, abs=1e-9)

    def test_zero_burstiness(self):
        assert prewarm_score(Category.BURST, 0, 1, 2, 10_000.0, 50, 50) == 0.0

    def test_burstiness_capped_when_avg_zero(self):
        got = prewarm_score(Category.BURST, 0, 0, 1, 100.0, 0.0, 10.0)
        assert got == pytest.approx(math.exp(0.0) * 100.0 * 10.0)

    def test_decay_with_rank(self):
        scores = [
            prewarm_score(Category.BASIC, i, 4, 0, 100.0, 10, 10) for i in range(4)
        ]
        assert scores == sorted(scores, reverse=True)


class TestValidateGroup:
    def test_nested(self):
        assert validate_group({0, 1}, [{0, 1, 2, 3}])

    def test_partial_overlap_forbidden(self):
        assert not validate_group({1, 2}, [{0, 1}])

    def test_disjoint(self):
        assert validate_group({4, 5}, [{0, 1}])

    def test_equal_sets_nested(self):
        assert validate_group({0, 1}, [{0, 1}])

    def test_empty_candidate_invalid(self):
        assert not validate_group(set(), [{0}])


class TestSortReplicas:
    def test_basic_before_burst_regardless_of_score(self):
        rs = [
            replica(0, cat=Category.BURST, score=1e9),
            replica(1, cat=Category.BASIC, score=1.0),
        ]
        assert [r.replica_id for r in sort_replicas(rs)] == [1, 0]

    def test_score_descending_within_category(self):
        rs = [
            replica(0, score=5.0),
            replica(1, score=50.0),
            replica(2, score=0.5),
        ]
        assert [r.replica_id for r in sort_replicas(rs)] == [1, 0, 2]


class TestPlanPlacement:
    def test_empty_cluster_two_gpu_replica(self):
        views = [view(i) for i in range(4)]
        specs = {"m": spec(weight=20, parallelism=2)}
        plan = plan_placement(
            [replica(0, score=5.0)], snapshot(views), [], specs
        )
        assert len(plan.assignments) == 1
        assert plan.assignments[0].gpu_group == (0, 1)
        assert plan.skipped == []

    def test_competing_replicas_nest_when_memory_allows(self):
        views = [view(0, free=100), view(1, free=100)]
        specs = {"a": spec("a", weight=80, parallelism=2),
                 "b": spec("b", weight=80, parallelism=2)}
        high = replica(0, model="a", score=9.0)
        low = replica(1, model="b", score=1.0)
        plan = plan_placement([low, high], snapshot(views), [], specs)
        assert [a.replica.replica_id for a in plan.assignments] == [0, 1]
        assert all(a.gpu_group == (0, 1) for a in plan.assignments)

    def test_competing_replicas_skip_when_memory_exhausted(self):
        views = [view(0, free=100), view(1, free=100)]
        specs = {"a": spec("a", weight=120, parallelism=2),
                 "b": spec("b", weight=120, parallelism=2)}
        high = replica(0, model="a", score=9.0)
        low = replica(1, model="b", score=1.0)
        plan = plan_placement([low, high], snapshot(views), [], specs)
        assert [a.replica.replica_id for a in plan.assignments] == [0]
        assert [(r.replica_id, reason) for r, reason in plan.skipped] == [
            (1, "no_valid_group")
        ]

    def test_prefers_group_where_new_score_dominates(self):
        # gpu0 holds a 12-score replica (lowest sum); gpu1 holds 7+6.
        # A new 10-score replica must avoid the dominating 12 group.
        views = [view(0, free=50), view(1, free=50)]
        existing = [
            replica(90, model="x", score=12.0, group={0}),
            replica(91, model="y", score=7.0, group={1}),
            replica(92, model="z", score=6.0, group={1}),
        ]
        specs = {"m": spec(weight=10)}
        plan = plan_placement(
            [replica(0, score=10.0)], snapshot(views), existing, specs
        )
        assert plan.assignments[0].gpu_group == (1,)

    def test_falls_back_to_min_sum_when_no_dominating_group(self):
        views = [view(0, free=50), view(1, free=50)]
        existing = [
            replica(90, model="x", score=12.0, group={0}),
            replica(91, model="y", score=20.0, group={1}),
        ]
        specs = {"m": spec(weight=10)}
        plan = plan_placement(
            [replica(0, score=10.0)], snapshot(views), existing, specs
        )
        assert plan.assignments[0].gpu_group == (0,)

    def test_same_model_replicas_get_disjoint_groups(self):
        views = [view(i) for i in range(4)]
        specs = {"m": spec(weight=10)}
        rs = [replica(i, score=5.0 - i) for i in range(3)]
        plan = plan_placement(rs, snapshot(views), [], specs)
        groups = [a.gpu_group for a in plan.assignments]
        assert len(groups) == 3
        assert len({g[0] for g in groups}) == 3

    def test_ineligible_and_low_memory_excluded(self):
        views = [
            view(0, free=5),
            view(1, eligible=False),
            view(2, free=50),
        ]
        specs = {"m": spec(weight=10)}
        plan = plan_placement([replica(0, score=1.0)], snapshot(views), [], specs)
        assert plan.assignments[0].gpu_group == (2,)

    def test_single_server_constraint(self):
        views = [view(0, server=0), view(1, server=1)]
        specs = {"m": spec(weight=10, parallelism=2)}
        plan = plan_placement([replica(0, score=1.0)], snapshot(views), [], specs)
        assert plan.assignments == []
        assert plan.skipped[0][1] == "no_valid_group"

    def test_processing_order_recorded(self):
        views = [view(i) for i in range(8)]
        specs = {c: spec(c, weight=10) for c in "abcd"}
        rs = [
            replica(0, model="a", cat=Category.BURST, score=100.0),
            replica(1, model="b", cat=Category.BASIC, score=1.0),
            replica(2, model="c", cat=Category.BASIC, score=50.0),
            replica(3, model="d", cat=Category.BURST, score=2.0),
        ]
        plan = plan_placement(rs, snapshot(views), [], specs)
        order = [a.replica.replica_id for a in plan.assignments]
        assert order == [2, 1, 0, 3]

    def test_deterministic(self):
        views = [view(i, free=30) for i in range(6)]
        specs = {"a": spec("a", weight=10), "b": spec("b", weight=10, parallelism=2)}
        rs = [
            replica(0, model="a", score=3.0),
            replica(1, model="b", score=2.0),
            replica(2, model="a", score=1.0),
        ]
        p1 = plan_placement(rs, snapshot(views), [], specs)
        p2 = plan_placement(
            [replica(0, model="a", score=3.0), replica(1, model="b", score=2.0),
             replica(2, model="a", score=1.0)],
            snapshot(views), [], specs,
        )
        assert [a.gpu_group for a in p1.assignments] == [
            a.gpu_group for a in p2.assignments
        ]


class TestEvictionVictims:
    def test_intersecting_groups_all_evicted(self):
        rs = [
            replica(0, model="a", score=1.0, group={0}),
            replica(1, model="b", score=2.0, group={0, 1}),
            replica(2, model="c", score=3.0, group={2}),
        ]
        victims = choose_eviction_victims({0}, rs)
        assert {v.replica_id for v in victims} == {0, 1}

    def test_no_overlap_empty(self):
        rs = [replica(0, model="a", score=1.0, group={0})]
        assert choose_eviction_victims({3}, rs) == []

    def test_consumed_and_invalidated_ignored(self):
        r = replica(0, model="a", score=1.0, group={0})
        r.status = ReplicaStatus.INVALIDATED
        assert choose_eviction_victims({0}, [r]) == []

    def test_caller_picks_min_score_sum(self):
        # candidate groups with victim sums 5 vs 9
        rs = [
            replica(0, model="a", score=5.0, group={0}),
            replica(1, model="b", score=9.0, group={1}),
            replica(2, model="t", score=1.0, group={0}),
            replica(3, model="t", score=1.0, group={1}),
        ]
        candidates = []
        for target in (rs[2], rs[3]):
            victims = [
                v for v in choose_eviction_victims(target.gpu_group, rs)
                if v is not target
            ]
            candidates.append((sum(v.score for v in victims), target))
        cost, chosen = min(candidates, key=lambda c: c[0])
        assert cost == 5.0
        assert chosen.gpu_group == frozenset({0})
        assert victims_oracle({0}, [tuple(r.gpu_group) for r in rs]) == [0, 2]


def random_valid_state(rng, n_gpus, n_replicas, capacity=100):
    """Build a random cluster state whose replica groups already satisfy the
    nested-or-disjoint and same-model-exclusion rules."""
    free = {g: capacity for g in range(n_gpus)}
    existing = []
    model_gpus = {}
    rid = 100
    for _ in range(n_replicas):
        model = rng.choice("vwxyz")
        size = rng.choice([1, 1, 2, 4])
        members = [g for g in range(n_gpus) if g not in model_gpus.get(model, set())]
        if len(members) < size:
            continue
        group = frozenset(rng.sample(members, size))
        need = rng.randint(5, 25)
        if not validate_group(group, [r.gpu_group for r in existing]):
            continue
        if any(free[g] < need for g in group):
            continue
        for g in group:
            free[g] -= need
        score = round(rng.uniform(0.5, 40.0), 3)
        existing.append(replica(rid, model=model, score=score, group=group))
        model_gpus.setdefault(model, set()).update(group)
        rid += 1
    views = [view(g, server=0, free=free[g]) for g in range(n_gpus)]
    return views, existing


class TestSelectionMatchesExhaustiveOracle:
    def test_randomized_states(self):
        rng = random.Random(2024)
        checked = 0
        for _ in range(400):
            n_gpus = rng.randint(1, 8)
            views, existing = random_valid_state(rng, n_gpus, rng.randint(0, 5))
            model = rng.choice("vwxyz")
            par = rng.choice([1, 2, 4])
            if par > n_gpus:
                continue
            weight = rng.randint(5, 30) * par
            specs = {model: spec(model, weight=weight, parallelism=par)}
            score = round(rng.uniform(0.5, 40.0), 3)
            new = replica(0, model=model, score=score)
            plan = plan_placement([new], snapshot(views), existing, specs)

            oracle_views = [
                {"gpu_id": v.gpu_id, "server_id": v.server_id,
                 "free_pages": v.free_pages, "eligible": v.eligible}
                for v in views
            ]
            blocked = frozenset(
                g for r in existing if r.model_id == model for g in r.gpu_group
            )
            groups = enumerate_valid_groups(
                oracle_views, par, specs[model].partition_pages(1),
                [r.gpu_group for r in existing], blocked,
            )
            if not groups:
                assert plan.assignments == []
                continue
            live = [(r.gpu_group, r.score) for r in existing]
            expect_group, expect_sum = select_group_oracle(groups, score, live)
            got = plan.assignments[0].gpu_group
            got_sum = sum(
                s for grp, s in live if frozenset(grp) & frozenset(got)
            )
            assert got_sum == expect_sum, (got, expect_group)
            assert got == expect_group
            checked += 1
        assert checked > 150


class TestPairwiseProperty:
    @settings(max_examples=120, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nested_or_disjoint_after_planning(self, seed):
        rng = random.Random(seed)
        n_gpus = rng.randint(2, 8)
        views, existing = random_valid_state(rng, n_gpus, rng.randint(0, 4))
        specs = {}
        new = []
        for i in range(rng.randint(1, 4)):
            model = rng.choice("vwxyz")
            par = rng.choice([1, 2])
            specs.setdefault(model, spec(model, weight=10 * par, parallelism=par))
            new.append(replica(i, model=model, score=rng.uniform(0.1, 20.0)))
        for r in existing:
            specs.setdefault(r.model_id, spec(r.model_id, weight=10))
        plan = plan_placement(new, snapshot(views), existing, specs)
        groups = [r.gpu_group for r in existing] + [
            frozenset(a.gpu_group) for a in plan.assignments
        ]
        for i, a in enumerate(groups):
            for b in groups[i + 1 :]:
                assert not (a & b) or a <= b or b <= a
