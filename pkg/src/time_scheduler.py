#!/usr/bin/env python3
"""
Time Scheduler - Offload-on-call-start and predictive upload

Driven by call_start / call_finish events from the engine:
- call_start: predict the call duration, compare it against the round-trip
  transfer time, and offload only if a waiting request fits in the window
  the freed blocks open up
- after an offload: plan an upload that completes at the predicted finish,
  with the device blocks reserved gradually ahead of time
- call_finish: feed the observed duration back to the predictor, upload at
  once if the cache is still on the host

Prediction per (agent_type, call label):
    no history:   hint if given, else cold-start estimate (tool class)
    with history: t_final = alpha * t_req + (1 - alpha) * t_hist   (hint given)
                  t_final = t_hist                                  (no hint)
    t_hist is an EWMA: t_hist <- beta * observed + (1 - beta) * t_hist
"""

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

from loguru import logger

from src.agent_graph import TOOL_CLASS_CENTERS_MS, AppGraph, find_fc_patterns
from src.block_memory import BlockPool, GradualReservation, TransferCostModel, TransferDirection


class RequestStateError(RuntimeError):
    """Raised when a lifecycle event arrives for a request in the wrong state"""


@dataclass
class FcPredictionEntry:
    cold_start_estimate: float
    t_hist: Optional[float] = None
    observation_count: int = 0


class FcPredictionTable:
    """Per (agent_type, label) call-duration history"""

    def __init__(self, alpha: float = 0.5, beta: float = 0.5, default_cold_start_ms: float = 100.0):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1] (got {alpha})")
        if not 0.0 < beta <= 1.0:
            raise ValueError(f"beta must be in (0, 1] (got {beta})")
        self.alpha = alpha
        self.beta = beta
        self.default_cold_start_ms = default_cold_start_ms
        self.entries: Dict[Tuple[str, str], FcPredictionEntry] = {}

    def register(self, agent_type: str, label: str, cold_start_estimate: float):
        key = (agent_type, label)
        if key not in self.entries:
            self.entries[key] = FcPredictionEntry(cold_start_estimate=cold_start_estimate)

    def entry(self, agent_type: str, label: str) -> FcPredictionEntry:
        key = (agent_type, label)
        if key not in self.entries:
            self.entries[key] = FcPredictionEntry(cold_start_estimate=self.default_cold_start_ms)
        return self.entries[key]


def predict_fc_duration(table: FcPredictionTable, agent_type: str, label: str,
                        t_req_hint: Optional[float] = None) -> float:
    """Predicted call duration t_final in ms"""
    entry = table.entry(agent_type, label)
    if entry.observation_count == 0 or entry.t_hist is None:
        return float(t_req_hint) if t_req_hint is not None else entry.cold_start_estimate
    if t_req_hint is None:
        return entry.t_hist
    return table.alpha * t_req_hint + (1.0 - table.alpha) * entry.t_hist


def record_fc_observation(table: FcPredictionTable, agent_type: str, label: str,
                          observed: float) -> FcPredictionTable:
    """Fold an observed call duration into the EWMA"""
    if not observed > 0:
        raise ValueError(f"observed duration must be > 0 (got {observed})")
    entry = table.entry(agent_type, label)
    if entry.t_hist is None:
        entry.t_hist = float(observed)
    else:
        entry.t_hist = table.beta * observed + (1.0 - table.beta) * entry.t_hist
    entry.observation_count += 1
    return table


class ThroughputMeter:
    """Decode throughput (tokens/s) over the last N engine steps"""

    def __init__(self, window_steps: int = 10, initial_tps: float = 0.0):
        self.samples = deque(maxlen=window_steps)
        self.initial_tps = initial_tps

    def record(self, tokens: int, duration_ms: float):
        if duration_ms > 0:
            self.samples.append((tokens, duration_ms))

    def tokens_per_second(self) -> float:
        elapsed = sum(d for _, d in self.samples)
        if elapsed <= 0:
            return self.initial_tps
        return sum(t for t, _ in self.samples) * 1000.0 / elapsed


@dataclass
class OffloadDecision:
    request_id: str
    decision: str  # 'offload' | 'retain'
    t_fc: float
    t_transfer: float
    t_window: float
    n_capacity: float
    n_blocks: int = 0
    matched_waiting_request: Optional[str] = None
    reason: str = ''

    @property
    def offload(self) -> bool:
        return self.decision == 'offload'


def find_best_fit(queue: Iterable, n_capacity: float):
    """Largest waiting request whose token demand fits in n_capacity (first wins ties)"""
    best = None
    for req in queue:
        demand = req.token_demand
        if demand <= n_capacity and (best is None or demand > best.token_demand):
            best = req
    return best


def should_offload(request, queue: Iterable, pool: BlockPool, model: TransferCostModel,
                   table: FcPredictionTable, v_throughput: float) -> OffloadDecision:
    """
    Decide whether a request that just started a call should be offloaded

    Args:
        request: stalled request (request_id, agent_type, fc_label, fc_hint)
        queue: waiting requests (request_id, token_demand)
        pool: BlockPool holding the request's device blocks
        model: TransferCostModel
        table: FcPredictionTable
        v_throughput: decode throughput in tokens/s

    Returns:
        OffloadDecision ('offload' only when a waiting request fits the window)
    """
    n_blocks = pool.held(request.request_id)
    t_transfer = model.transfer_time(n_blocks, TransferDirection.ROUNDTRIP)
    t_fc = predict_fc_duration(table, request.agent_type, request.fc_label, request.fc_hint)

    if t_fc <= t_transfer:
        return OffloadDecision(request.request_id, 'retain', t_fc, t_transfer, 0.0, 0.0,
                               n_blocks=n_blocks, reason='stall too short')

    t_window = t_fc - t_transfer
    n_capacity = t_window * v_throughput / 1000.0
    match = find_best_fit(queue, n_capacity)
    if match is None:
        return OffloadDecision(request.request_id, 'retain', t_fc, t_transfer, t_window, n_capacity,
                               n_blocks=n_blocks, reason='no waiting request fits')
    return OffloadDecision(request.request_id, 'offload', t_fc, t_transfer, t_window, n_capacity,
                           n_blocks=n_blocks, matched_waiting_request=match.request_id)


@dataclass
class UploadPlan:
    request_id: str
    call_start_time: float
    predicted_finish: float
    upload_start: float
    upload_duration: float
    offload_done: float
    reservation_deadline: Optional[float] = None
    reservation: Optional[GradualReservation] = None
    immediate: bool = False
    superseded: bool = False
    launched: bool = False


def plan_predictive_upload(decision: OffloadDecision, model: TransferCostModel, now: float,
                           call_start_time: Optional[float] = None,
                           reservation_lead: float = 100.0,
                           offload_done: Optional[float] = None) -> UploadPlan:
    """
    Plan an upload that lands exactly at the predicted call finish

    Args:
        decision: an 'offload' decision
        model: TransferCostModel
        now: time the offload ticket was issued
        call_start_time: when the call started (defaults to now)
        reservation_lead: gap between reservation deadline and upload start (ms)
        offload_done: offload ticket completion (defaults to now + offload time)

    Returns:
        UploadPlan; immediate=True when the window is too short to plan ahead
    """
    if not decision.offload:
        raise ValueError(f"Cannot plan an upload for a '{decision.decision}' decision")
    call_start_time = now if call_start_time is None else call_start_time
    if offload_done is None:
        offload_done = now + model.transfer_time(decision.n_blocks, TransferDirection.OFFLOAD)
    upload_ms = model.transfer_time(decision.n_blocks, TransferDirection.UPLOAD)
    predicted_finish = call_start_time + decision.t_fc
    upload_start = predicted_finish - upload_ms

    if upload_start <= offload_done:
        return UploadPlan(decision.request_id, call_start_time, predicted_finish,
                          upload_start=offload_done, upload_duration=upload_ms,
                          offload_done=offload_done, immediate=True)

    deadline = upload_start - reservation_lead
    if deadline <= offload_done:
        deadline = upload_start
    return UploadPlan(decision.request_id, call_start_time, predicted_finish,
                      upload_start=upload_start, upload_duration=upload_ms,
                      offload_done=offload_done, reservation_deadline=deadline)


class CacheResidency(str, Enum):
    DEVICE = 'device'
    OFFLOADING = 'offloading'
    HOST = 'host'
    UPLOADING = 'uploading'
    DROPPED = 'dropped'


class FinishAction(str, Enum):
    RESUME_NOW = 'resume_now'
    UPLOAD_NOW = 'upload_now'
    RESUME_AFTER_UPLOAD = 'resume_after_upload'
    UPLOAD_AFTER_OFFLOAD = 'upload_after_offload'
    RECOMPUTE = 'recompute'


class TimeScheduler:
    """Offload decisions, upload plans and call-duration prediction for one engine"""

    def __init__(self, config: dict):
        """
        Initialize time scheduler

        Args:
            config: full configuration dict (reads the 'time_scheduler' section)
        """
        self.config = config.get('time_scheduler', {})
        self.enabled = self.config.get('enabled', True)
        self.reservation_lead_ms = float(self.config.get('reservation_lead_ms', 100.0))
        self.gradual_reservation = self.config.get('gradual_reservation', True)
        self.gradual_cycles = int(self.config.get('gradual_cycles', 4))
        self.reservation_window_ms = float(self.config.get('reservation_window_ms', 400.0))

        self.table = FcPredictionTable(
            alpha=float(self.config.get('alpha', 0.5)),
            beta=float(self.config.get('beta', 0.5)),
            default_cold_start_ms=float(self.config.get('default_cold_start_ms',
                                                        TOOL_CLASS_CENTERS_MS['short_fs'])),
        )
        self.meter = ThroughputMeter(
            window_steps=int(self.config.get('throughput_window_steps', 10)),
            initial_tps=float(self.config.get('initial_throughput_tps', 0.0)),
        )
        self.plans: Dict[str, UploadPlan] = {}

        self.stats = {
            'decisions': 0,
            'offloads': 0,
            'retains_short': 0,
            'retains_no_fit': 0,
            'plans': 0,
            'immediate_plans': 0,
            'finish_early': 0,
            'finish_late': 0,
            'finish_on_time': 0,
        }

    def analyze_graph(self, graph: AppGraph) -> List[Tuple[str, str, str]]:
        """
        Pre-runtime pass: find LLM -> call -> LLM patterns and seed cold-start estimates

        Returns:
            the (pred, func, succ) patterns found
        """
        for node in graph.func_nodes():
            cold = TOOL_CLASS_CENTERS_MS.get(node.tool_class or '', None)
            if cold is None:
                cold = node.call_latency_dist().mean()
            for stage in node.stages:
                self.table.register(node.agent_type, stage, cold)
        patterns = find_fc_patterns(graph)
        logger.debug(f"Graph '{graph.name}': {len(patterns)} LLM->call->LLM patterns, "
                     f"{len(self.table.entries)} prediction keys")
        return patterns

    def decide(self, request, waiting: Iterable, pool: BlockPool) -> OffloadDecision:
        decision = should_offload(request, waiting, pool, pool.cost_model, self.table,
                                  self.meter.tokens_per_second())
        self.stats['decisions'] += 1
        if decision.offload:
            self.stats['offloads'] += 1
        elif decision.reason == 'stall too short':
            self.stats['retains_short'] += 1
        else:
            self.stats['retains_no_fit'] += 1
        return decision

    def plan_upload(self, decision: OffloadDecision, pool: BlockPool, now: float,
                    call_start_time: float, offload_done: float, agent_type: str) -> UploadPlan:
        plan = plan_predictive_upload(decision, pool.cost_model, now,
                                      call_start_time=call_start_time,
                                      reservation_lead=self.reservation_lead_ms,
                                      offload_done=offload_done)
        if self.gradual_reservation and not plan.immediate:
            plan.reservation = pool.begin_gradual_reservation(
                decision.request_id, decision.n_blocks,
                start_time=max(offload_done, plan.reservation_deadline - self.reservation_window_ms),
                deadline=plan.reservation_deadline, cycles=self.gradual_cycles,
                agent_type=agent_type)
        self.plans[decision.request_id] = plan
        self.stats['plans'] += 1
        if plan.immediate:
            self.stats['immediate_plans'] += 1
        return plan

    def handle_call_finish(self, request, now: float, observed: float) -> Tuple[FinishAction, str]:
        """
        React to call_finish

        Args:
            request: stalled request (request_id, agent_type, fc_label, stalled, residency)
            now: current time (ms)
            observed: observed call duration (ms)

        Returns:
            (action, timing) where timing is 'early', 'late', 'on_time' or ''

        Raises:
            RequestStateError: request is not stalled on a call
        """
        if request is None or not getattr(request, 'stalled', False):
            raise RequestStateError(f"call_finish for a request that is not stalled: {request!r}")
        if observed > 0:
            record_fc_observation(self.table, request.agent_type, request.fc_label, observed)

        timing = ''
        plan = self.plans.pop(request.request_id, None)
        if plan is not None:
            plan.superseded = True
            if now < plan.upload_start and not plan.launched:
                timing = 'early'
            elif now > plan.predicted_finish:
                timing = 'late'
            else:
                timing = 'on_time'
            self.stats[f'finish_{timing}'] += 1

        residency = CacheResidency(request.residency)
        if residency is CacheResidency.DEVICE:
            return FinishAction.RESUME_NOW, timing
        if residency is CacheResidency.HOST:
            return FinishAction.UPLOAD_NOW, timing
        if residency is CacheResidency.UPLOADING:
            return FinishAction.RESUME_AFTER_UPLOAD, timing
        if residency is CacheResidency.OFFLOADING:
            return FinishAction.UPLOAD_AFTER_OFFLOAD, timing
        return FinishAction.RECOMPUTE, timing

    def get_stats(self) -> dict:
        return self.stats.copy()
