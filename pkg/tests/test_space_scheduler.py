#!/usr/bin/env python3
"""
Space scheduler tests - hybrid scores, critical selection, reservation updates
"""

import math
import random
from types import SimpleNamespace

import pytest
from hypothesis import given, settings, strategies as st

from src.agent_graph import AgentNode
from src.block_memory import BlockPool
from src.space_scheduler import (
    FLOOR_EPSILON,
    HybridScore,
    PartitionPlan,
    SpaceScheduler,
    detect_critical_inversion,
    dynamic_priority,
    score_agent_types,
    select_critical,
    update_memory_reservations,
)
from conftest import make_graph


def req(agent_type, wait_since=0.0, demand=1000):
    return SimpleNamespace(agent_type=agent_type, wait_since=wait_since, token_demand=demand)


def scores_of(mapping):
    return [HybridScore(t, float(v), 0.0) for t, v in mapping.items()]


class TestDynamicPriority:
    def test_log_identity(self):
        assert dynamic_priority(2.0, 2 * math.e ** 2) == pytest.approx(4.0)

    def test_zero_wait(self):
        assert dynamic_priority(0.0, 500) == 0.0
        assert dynamic_priority(1e-6, 500) == pytest.approx(0.0, abs=1e-3)

    def test_ratio_clamped(self):
        assert dynamic_priority(1000.0, 10) == 0.0

    def test_never_negative(self):
        rnd = random.Random(3)
        for _ in range(1000):
            assert dynamic_priority(rnd.uniform(-10, 1e5), rnd.uniform(1, 1e5)) >= 0.0


class TestScoring:
    @pytest.fixture
    def graph(self):
        # planner (depth 1, out 2 -> 2), worker x2 (depth 2, out 1 -> 2), writer sink
        return make_graph(
            [AgentNode('plan', 'planner'), AgentNode('w1', 'worker'), AgentNode('w2', 'worker'),
             AgentNode('out', 'writer')],
            [('plan', 'w1'), ('plan', 'w2'), ('w1', 'out'), ('w2', 'out')],
        )

    def test_static_only_without_waiters(self, graph):
        scores = {s.agent_type: s for s in score_agent_types([], graph, 1.0, now=0.0)}
        assert scores['planner'].combined == 2.0
        assert scores['writer'].combined == 0.0
        assert all(s.dynamic_score == 0.0 for s in scores.values())

    def test_identical_waiters_double(self, graph):
        one = {s.agent_type: s for s in score_agent_types([req('writer', 0.0, 5000)], graph, 1.0, now=100.0)}
        two = {s.agent_type: s for s in score_agent_types([req('writer', 0.0, 5000)] * 2, graph, 1.0, now=100.0)}
        assert one['writer'].dynamic_score > 0
        assert two['writer'].dynamic_score == pytest.approx(2 * one['writer'].dynamic_score)

    def test_zero_static_ranks_by_dynamic(self):
        graph = make_graph([AgentNode('a', 'alpha'), AgentNode('b', 'beta')], [])
        ranked = score_agent_types([req('beta', 0.0, 9000), req('alpha', 50.0, 9000)], graph, 1.0, now=100.0)
        assert [s.agent_type for s in ranked] == ['beta', 'alpha']

    def test_ties_lexical(self):
        graph = make_graph([AgentNode('a', 'zeta'), AgentNode('b', 'alpha')], [])
        assert [s.agent_type for s in score_agent_types([], graph, 1.0, 0.0)] == ['alpha', 'zeta']


class TestSelectCritical:
    def test_quarter_of_four(self):
        assert len(select_critical(scores_of({'a': 4, 'b': 3, 'c': 2, 'd': 1}), 0.25)) == 1

    def test_full_ratio(self):
        assert set(select_critical(scores_of({'a': 4, 'b': 3, 'c': 2}), 1.0)) == {'a', 'b', 'c'}

    def test_tie_break(self):
        # ceil(0.33 * 3) = 1
        assert select_critical(scores_of({'B': 5, 'A': 5, 'C': 1}), 0.33) == ('A',)

    def test_ceiling_at_034_keeps_two(self):
        # known deviation: {A: 5, B: 5, C: 1} at 0.34 gives two types, not {A},
        # because ceil(0.34 * 3) = 2; a single type needs a ratio of at most 1/3
        assert select_critical(scores_of({'B': 5, 'A': 5, 'C': 1}), 0.34) == ('A', 'B')

    def test_empty(self):
        assert select_critical([], 0.5) == ()

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            select_critical(scores_of({'a': 1}), 0.0)
        with pytest.raises(ValueError):
            select_critical(scores_of({'a': 1}), 1.5)

    @settings(max_examples=200, deadline=None)
    @given(st.dictionaries(st.sampled_from('abcdefgh'), st.integers(min_value=0, max_value=100), min_size=1),
           st.integers(min_value=1, max_value=50),
           st.floats(min_value=0.05, max_value=1.0))
    def test_scaling_scores_keeps_selection(self, mapping, factor, ratio):
        scaled = {t: v * factor for t, v in mapping.items()}
        assert select_critical(scores_of(mapping), ratio) == select_critical(scores_of(scaled), ratio)


class TestReservationUpdate:
    def test_phase_one_grow(self):
        plan = PartitionPlan(total_reserve_ratio=0.10)
        new = update_memory_reservations(plan, 1000, [], usage_sample=900, type_usage={})
        assert new.total_reserve_ratio == pytest.approx(0.15)
        assert new.r_total == pytest.approx(150.0)
        assert plan.total_reserve_ratio == 0.10

    def test_phase_one_shrink(self):
        plan = PartitionPlan(total_reserve_ratio=0.10)
        new = update_memory_reservations(plan, 1000, [], usage_sample=400, type_usage={})
        assert new.total_reserve_ratio == pytest.approx(0.05)

    def test_phase_two_split(self):
        plan = PartitionPlan(total_reserve_ratio=0.10)
        scores = scores_of({'X': 3, 'Y': 1})
        new = update_memory_reservations(plan, 1000, scores, usage_sample=900,
                                         type_usage={'X': 100, 'Y': 100}, critical_set=('X', 'Y'))
        assert new.reserve_num == {'X': 63, 'Y': 26}

    def test_zero_scores_split_equally(self):
        plan = PartitionPlan(total_reserve_ratio=0.35)
        new = update_memory_reservations(plan, 1000, scores_of({'X': 0, 'Y': 0}), usage_sample=900,
                                         type_usage={}, critical_set=('X', 'Y'))
        assert new.reserve_num['X'] == new.reserve_num['Y'] == 100

    def test_over_max_renormalized(self):
        plan = PartitionPlan(total_reserve_ratio=0.35, critical_ratio=1.0)
        scores = scores_of({'X': 1, 'Y': 1})
        new = update_memory_reservations(plan, 1000, scores, usage_sample=1000,
                                         type_usage={'X': 1000, 'Y': 1000})
        assert sum(new.reserve_num.values()) <= new.r_total

    def test_selects_critical_by_default(self):
        plan = PartitionPlan(total_reserve_ratio=0.2, critical_ratio=0.25)
        scores = scores_of({'a': 9, 'b': 3, 'c': 2, 'd': 1})
        new = update_memory_reservations(plan, 1000, scores, usage_sample=700, type_usage={})
        assert new.critical_set == ('a',)
        assert set(new.reserve_num) == {'a'}

    def test_from_config_validates_thresholds(self):
        with pytest.raises(ValueError):
            PartitionPlan.from_config({'space_scheduler': {'gpu_usage_low': 0.9, 'gpu_usage_high': 0.5}})

    def test_matches_reference_update(self):
        """Random inputs against a direct evaluation of both phases"""
        rnd = random.Random(5)
        for _ in range(10000):
            total = rnd.randint(100, 20000)
            prior = round(rnd.uniform(0.0, 0.4), 2)
            usage = rnd.uniform(0, total)
            types = rnd.sample('abcdef', rnd.randint(1, 6))
            mapping = {t: rnd.choice([0, rnd.uniform(0, 50)]) for t in types}
            type_usage = {t: rnd.uniform(0, total / len(types)) for t in types}
            critical_ratio = rnd.choice([0.25, 0.5, 1.0])
            plan = PartitionPlan(total_reserve_ratio=prior, critical_ratio=critical_ratio)
            new = update_memory_reservations(plan, total, scores_of(mapping), usage, type_usage)

            ratio = prior
            if usage / total >= 0.85:
                ratio += 0.05
            elif usage / total <= 0.50:
                ratio -= 0.05
            ratio = round(min(max(ratio, 0.0), 0.4), 10)
            assert new.total_reserve_ratio == ratio

            count = math.ceil(round(critical_ratio * len(types), 10))
            ranked = sorted(types, key=lambda t: (-mapping[t], t))
            assert new.critical_set == tuple(ranked[:count])

            r_total = total * new.total_reserve_ratio
            s_total = sum(mapping[t] for t in new.critical_set)
            final = {}
            for t in new.critical_set:
                p = mapping[t] / s_total if s_total > 0 else 1.0 / len(new.critical_set)
                final[t] = (type_usage[t] / total + p) / 2.0
            if sum(final.values()) > 1.0:
                scale = sum(final.values())
                final = {t: r / scale for t, r in final.items()}
            assert new.reserve_num == {t: math.floor(r * r_total + FLOOR_EPSILON) for t, r in final.items()}
            assert sum(new.reserve_num.values()) <= r_total + 1e-6

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=40),
           st.floats(min_value=0.0, max_value=0.4))
    def test_ratio_stays_clamped(self, usage_ratios, start):
        plan = PartitionPlan(total_reserve_ratio=start)
        for u in usage_ratios:
            plan = update_memory_reservations(plan, 1000, [], u * 1000, {})
            assert 0.0 <= plan.total_reserve_ratio <= plan.reserve_ratio_max

    @settings(max_examples=200, deadline=None)
    @given(st.floats(min_value=0.51, max_value=0.84), st.floats(min_value=0.0, max_value=0.4))
    def test_hysteresis_band(self, usage_ratio, start):
        start = round(start, 10)
        plan = PartitionPlan(total_reserve_ratio=start)
        new = update_memory_reservations(plan, 1000, [], usage_ratio * 1000, {})
        assert new.total_reserve_ratio == pytest.approx(start)


class TestInversion:
    def test_definition(self):
        scores = scores_of({'crit': 10, 'low': 2, 'mid': 5, 'same': 10})
        assert detect_critical_inversion(req('crit'), req('low'), scores)
        assert not detect_critical_inversion(req('crit'), req('same'), scores)
        assert not detect_critical_inversion(req('low'), req('mid'), scores)

    def test_scheduler_counts_and_applies(self):
        graph = make_graph(
            [AgentNode('plan', 'planner'), AgentNode('w', 'worker'), AgentNode('out', 'writer')],
            [('plan', 'w'), ('w', 'out')],
        )
        sched = SpaceScheduler({'space_scheduler': {'initial_reserve_ratio': 0.1, 'critical_ratio': 0.34}})
        sched.rescore([], graph, now=0.0)
        pool = BlockPool(1000, 1000)
        plan, changed = sched.update(pool, usage_sample=900, type_usage={})
        assert changed
        # worker: depth 2 x out 1 = 2 beats planner: 1 x 1
        assert plan.critical_set[0] == 'worker'
        assert pool.reserved['worker'].target_blocks == plan.reserve_num['worker']
        assert sched.check_inversion(req('worker'), req('writer'))
        assert sched.get_stats()['inversions'] == 1
        assert sched.score_of('worker') == 2.0
