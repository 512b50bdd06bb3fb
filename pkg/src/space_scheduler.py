#!/usr/bin/env python3
"""
Space Scheduler - Hybrid priorities and dynamic memory partitioning

Per agent type:
    static score  = max over the type's nodes of w_static * depth * out_degree
    dynamic score = sum over its waiting requests of
                    time_wait * ln(max(tokens / max(time_wait, 1 ms), 1))
    combined      = static + dynamic

Every partition period the top critical_ratio of types (by combined score)
become critical and share a reserved slice of device blocks:
    phase 1: grow/shrink the reserved fraction with device usage (hysteresis
             between gpu_usage_low and gpu_usage_high, clamped to the max)
    phase 2: split the reserved blocks among critical types by the mean of
             their memory share and their priority share
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from loguru import logger

from src.agent_graph import AppGraph, agent_type_static_score
from src.block_memory import BlockPool


RATIO_DECIMALS = 10
FLOOR_EPSILON = 1e-9


def dynamic_priority(time_wait: float, tokens_req: float) -> float:
    """Waiting-time / demand score of one waiting request (never negative)"""
    time_wait = max(float(time_wait), 0.0)
    if time_wait == 0.0:
        return 0.0
    ratio = tokens_req / max(time_wait, 1.0)
    return time_wait * math.log(max(ratio, 1.0))


@dataclass
class HybridScore:
    agent_type: str
    static_score: float
    dynamic_score: float

    @property
    def combined(self) -> float:
        return self.static_score + self.dynamic_score


def score_agent_types(waiting_queue: Iterable, graph: AppGraph, w_static: float,
                      now: float) -> List[HybridScore]:
    """
    Hybrid score for every agent type of the graph

    Args:
        waiting_queue: requests with agent_type, wait_since (ms) and token_demand
        graph: validated AppGraph
        w_static: static weight (> 0)
        now: current time (ms)

    Returns:
        HybridScore list ordered by combined score (desc), ties by agent_type
    """
    dynamic: Dict[str, float] = {t: 0.0 for t in graph.agent_types()}
    for req in waiting_queue:
        dynamic[req.agent_type] = dynamic.get(req.agent_type, 0.0) + \
            dynamic_priority(now - req.wait_since, req.token_demand)

    scores = []
    for agent_type in sorted(dynamic):
        static = agent_type_static_score(graph, agent_type, w_static) if graph.nodes_of_type(agent_type) else 0.0
        scores.append(HybridScore(agent_type, static, dynamic[agent_type]))
    return sorted(scores, key=lambda s: (-s.combined, s.agent_type))


def select_critical(scores: Sequence[HybridScore], critical_ratio: float) -> Tuple[str, ...]:
    """Top ceil(critical_ratio * type_count) types by combined score (ties lexical)"""
    if not 0.0 < critical_ratio <= 1.0:
        raise ValueError(f"critical_ratio must be in (0, 1] (got {critical_ratio})")
    if not scores:
        return ()
    count = int(math.ceil(round(critical_ratio * len(scores), RATIO_DECIMALS)))
    ranked = sorted(scores, key=lambda s: (-s.combined, s.agent_type))
    return tuple(s.agent_type for s in ranked[:count])


@dataclass
class PartitionPlan:
    total_reserve_ratio: float = 0.0
    critical_set: Tuple[str, ...] = ()
    reserve_num: Dict[str, int] = field(default_factory=dict)
    r_total: float = 0.0
    gpu_usage_high: float = 0.85
    gpu_usage_low: float = 0.50
    adjustment_step: float = 0.05
    reserve_ratio_max: float = 0.40
    critical_ratio: float = 0.25

    @classmethod
    def from_config(cls, config: dict) -> 'PartitionPlan':
        section = config.get('space_scheduler', {})
        plan = cls(
            total_reserve_ratio=float(section.get('initial_reserve_ratio', 0.0)),
            gpu_usage_high=float(section.get('gpu_usage_high', 0.85)),
            gpu_usage_low=float(section.get('gpu_usage_low', 0.50)),
            adjustment_step=float(section.get('adjustment_step', 0.05)),
            reserve_ratio_max=float(section.get('reserve_ratio_max', 0.40)),
            critical_ratio=float(section.get('critical_ratio', 0.25)),
        )
        if not plan.gpu_usage_low < plan.gpu_usage_high:
            raise ValueError("space_scheduler.gpu_usage_low must be below gpu_usage_high")
        return plan


def update_memory_reservations(plan: PartitionPlan, total_blocks: int, scores: Sequence[HybridScore],
                               usage_sample: float, type_usage: Dict[str, float],
                               critical_set: Optional[Sequence[str]] = None) -> PartitionPlan:
    """
    Two-phase reservation update

    Args:
        plan: current PartitionPlan (not modified)
        total_blocks: device blocks
        scores: current HybridScores
        usage_sample: device blocks in use over the last interval
        type_usage: per-type blocks in use over the same interval
        critical_set: override the critical selection (default: select_critical)

    Returns:
        new PartitionPlan
    """
    # Phase 1: size of the reserved pool
    usage_ratio = usage_sample / total_blocks
    ratio = plan.total_reserve_ratio
    if usage_ratio >= plan.gpu_usage_high:
        ratio += plan.adjustment_step
    elif usage_ratio <= plan.gpu_usage_low:
        ratio -= plan.adjustment_step
    ratio = round(min(max(ratio, 0.0), plan.reserve_ratio_max), RATIO_DECIMALS)
    r_total = total_blocks * ratio

    # Phase 2: split among critical types
    if critical_set is None:
        critical_set = select_critical(scores, plan.critical_ratio)
    critical_set = tuple(critical_set)
    by_type = {s.agent_type: s.combined for s in scores}
    s_total = sum(by_type.get(t, 0.0) for t in critical_set)

    final_ratio: Dict[str, float] = {}
    for agent_type in critical_set:
        mem_ratio = type_usage.get(agent_type, 0.0) / total_blocks
        if s_total > 0:
            priority_ratio = by_type.get(agent_type, 0.0) / s_total
        else:
            priority_ratio = 1.0 / len(critical_set)
        final_ratio[agent_type] = (mem_ratio + priority_ratio) / 2.0

    ratio_sum = sum(final_ratio.values())
    if ratio_sum > 1.0:
        final_ratio = {t: r / ratio_sum for t, r in final_ratio.items()}

    reserve_num = {t: int(math.floor(r * r_total + FLOOR_EPSILON)) for t, r in final_ratio.items()}
    return replace(plan, total_reserve_ratio=ratio, critical_set=critical_set,
                   reserve_num=reserve_num, r_total=r_total)


def detect_critical_inversion(evicted_request, cause_request, scores: Sequence[HybridScore]) -> bool:
    """True iff the evicted request's type outranks the type that caused the eviction"""
    by_type = {s.agent_type: s.combined for s in scores}
    return by_type.get(evicted_request.agent_type, 0.0) > by_type.get(cause_request.agent_type, 0.0)


class SpaceScheduler:
    """Keeps hybrid scores current and applies partition plans to a BlockPool"""

    def __init__(self, config: dict):
        """
        Initialize space scheduler

        Args:
            config: full configuration dict (reads the 'space_scheduler' section)
        """
        self.config = config.get('space_scheduler', {})
        self.enabled = self.config.get('enabled', True)
        self.w_static = float(self.config.get('w_static', 1.0))
        self.update_period_steps = int(self.config.get('update_period_steps', 50))
        self.plan = PartitionPlan.from_config(config)
        self.scores: List[HybridScore] = []

        self.stats = {
            'partition_updates': 0,
            'critical_set_changes': 0,
            'inversions': 0,
        }

    def rescore(self, waiting_queue: Iterable, graph: AppGraph, now: float) -> List[HybridScore]:
        self.scores = score_agent_types(waiting_queue, graph, self.w_static, now)
        return self.scores

    def score_of(self, agent_type: str) -> float:
        for s in self.scores:
            if s.agent_type == agent_type:
                return s.combined
        return 0.0

    def update(self, pool: BlockPool, usage_sample: float, type_usage: Dict[str, float]) -> Tuple[PartitionPlan, bool]:
        """
        Run one partition update and apply it to the pool

        Returns:
            (new plan, whether the critical set changed)
        """
        old_critical = set(self.plan.critical_set)
        self.plan = update_memory_reservations(self.plan, pool.total_device_blocks, self.scores,
                                               usage_sample, type_usage)
        pool.set_reservations(self.plan.reserve_num)
        self.stats['partition_updates'] += 1
        changed = set(self.plan.critical_set) != old_critical
        if changed:
            self.stats['critical_set_changes'] += 1
            logger.debug(f"Critical set -> {list(self.plan.critical_set)} "
                         f"(ratio {self.plan.total_reserve_ratio:.2f}, R_total {self.plan.r_total:.0f})")
        return self.plan, changed

    def check_inversion(self, evicted_request, cause_request) -> bool:
        inverted = detect_critical_inversion(evicted_request, cause_request, self.scores)
        if inverted:
            self.stats['inversions'] += 1
        return inverted

    def get_stats(self) -> dict:
        return self.stats.copy()
