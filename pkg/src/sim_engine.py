#!/usr/bin/env python3
"""
Simulation Engine - Discrete-event model of an agent-serving engine

Request lifecycle:
    Waiting -> Prefill -> Decode -> StalledFC <-> (Offloaded -> Uploading) -> Decode -> Done
    Evicted -> Waiting (re-entry pays recompute of the whole footprint)

Compute model:
    step_time = base_step_ms + per_seq_ms * batch_size + prefill cost
    prefill cost = prompt tokens / prefill_tokens_per_ms (recompute_time() on re-entry)
    each Decode request gains exactly one token per step

Scheduling cycle (engine_step), run once all events of a timestamp are handled:
    1. launch predictive uploads that are due (and retry stalled ones)
    2. launch pending offloads
    3. admit waiting requests by hybrid priority (resumed requests first),
       leaving room for uploads that are about to start
    4. grow decode footprints, evicting resident low-score requests under
       pressure; a request that still cannot grow pauses for the step
    5. schedule the next StepComplete

Policies: tokencake (time + space), retain, evict, space-only, time-only
"""

import heapq
import itertools
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from src.agent_graph import AppGraph, FuncNode
from src.block_memory import BlockPool, TransferDirection, blocks_for_tokens, split_chunks
from src.metrics import MetricsReport, TraceEvent, aggregate
from src.space_scheduler import SpaceScheduler
from src.time_scheduler import CacheResidency, FinishAction, RequestStateError, TimeScheduler
from src.workload import AppInstancePlan, ConfigError, Scenario, expected_output_tokens, generate_workload


class RequestState(str, Enum):
    WAITING = 'waiting'
    PREFILL = 'prefill'
    DECODE = 'decode'
    STALLED_FC = 'stalled_fc'
    OFFLOADED = 'offloaded'
    UPLOADING = 'uploading'
    EVICTED = 'evicted'
    DONE = 'done'


ALLOWED_TRANSITIONS = {
    RequestState.WAITING: {RequestState.PREFILL},
    RequestState.PREFILL: {RequestState.DECODE, RequestState.EVICTED},
    RequestState.DECODE: {RequestState.STALLED_FC, RequestState.DONE, RequestState.EVICTED},
    RequestState.STALLED_FC: {RequestState.OFFLOADED, RequestState.DECODE, RequestState.EVICTED},
    RequestState.OFFLOADED: {RequestState.UPLOADING},
    RequestState.UPLOADING: {RequestState.STALLED_FC, RequestState.DECODE},
    RequestState.EVICTED: {RequestState.WAITING},
    RequestState.DONE: set(),
}


class GenerationAction(str, Enum):
    """What a request does after a decode step"""
    CONTINUE = 'continue'
    CALL = 'call'
    DONE = 'done'


class Policy(str, Enum):
    TOKENCAKE = 'tokencake'
    RETAIN = 'retain'
    EVICT = 'evict'
    SPACE_ONLY = 'space-only'
    TIME_ONLY = 'time-only'


# policy -> (time scheduler, space scheduler, drop cache on call start)
POLICY_FLAGS = {
    Policy.TOKENCAKE: (True, True, False),
    Policy.RETAIN: (False, False, False),
    Policy.EVICT: (False, False, True),
    Policy.SPACE_ONLY: (False, True, False),
    Policy.TIME_ONLY: (True, False, False),
}


class EventKind(IntEnum):
    """Event kinds; the value is the tie-break rank at equal timestamps"""
    ARRIVAL = 0
    STEP_COMPLETE = 1
    CALL_START = 2
    CALL_FINISH = 3
    TRANSFER_DONE = 4
    RESERVATION_TICK = 5
    PARTITION_UPDATE = 6


class EventQueue:
    """Time-ordered heap; ties broken by (kind rank, insertion sequence)"""

    def __init__(self):
        self._heap = []
        self._seq = itertools.count()

    def push(self, t: float, kind: EventKind, payload=None):
        heapq.heappush(self._heap, (float(t), int(kind), next(self._seq), payload))

    def pop(self) -> Tuple[float, EventKind, object]:
        t, kind, _, payload = heapq.heappop(self._heap)
        return t, EventKind(kind), payload

    def peek_time(self) -> Optional[float]:
        return self._heap[0][0] if self._heap else None

    def __len__(self):
        return len(self._heap)


@dataclass
class EngineConfig:
    base_step_ms: float = 5.0
    per_seq_ms: float = 1.0
    prefill_tokens_per_ms: float = 4096 * 16 / 9000.0
    decode_tokens_per_step: int = 1
    max_batch_size: int = 64
    block_size: int = 16
    watermark_blocks: int = 0
    upload_guard_ms: float = 500.0
    policy: Policy = Policy.TOKENCAKE
    time_enabled: bool = True
    space_enabled: bool = True
    evict_on_call: bool = False
    horizon_ms: Optional[float] = None
    progress_every_ms: float = 60000.0
    check_invariants: bool = False

    def __post_init__(self):
        if not (self.base_step_ms > 0 and self.per_seq_ms >= 0 and self.prefill_tokens_per_ms > 0):
            raise ConfigError("engine rates must be > 0")
        if self.max_batch_size < 1 or self.block_size < 1:
            raise ConfigError("engine.max_batch_size and engine.block_size must be >= 1")
        if self.decode_tokens_per_step != 1:
            raise ConfigError("engine.decode_tokens_per_step must be 1")
        if self.evict_on_call and self.time_enabled:
            raise ConfigError("the evict baseline cannot be combined with the time scheduler")
        if self.upload_guard_ms < 0:
            raise ConfigError("engine.upload_guard_ms must be >= 0")

    @classmethod
    def from_config(cls, config: dict, policy='tokencake') -> 'EngineConfig':
        engine = config.get('engine', {})
        try:
            policy = Policy(policy)
        except ValueError:
            raise ConfigError(f"Unknown policy '{policy}' (choose from {[p.value for p in Policy]})")
        time_on, space_on, evict_on = POLICY_FLAGS[policy]
        total = config.get('memory', {}).get('total_device_blocks', 2048)
        return cls(
            base_step_ms=float(engine.get('base_step_ms', 5.0)),
            per_seq_ms=float(engine.get('per_seq_ms', 1.0)),
            prefill_tokens_per_ms=float(engine.get('prefill_tokens_per_ms', 4096 * 16 / 9000.0)),
            decode_tokens_per_step=int(engine.get('decode_tokens_per_step', 1)),
            max_batch_size=int(engine.get('max_batch_size', 64)),
            block_size=int(engine.get('block_size', 16)),
            watermark_blocks=int(engine.get('watermark_fraction', 0.01) * total),
            upload_guard_ms=float(engine.get('upload_guard_ms', 500.0)),
            policy=policy,
            time_enabled=time_on and config.get('time_scheduler', {}).get('enabled', True),
            space_enabled=space_on and config.get('space_scheduler', {}).get('enabled', True),
            evict_on_call=evict_on,
            horizon_ms=engine.get('horizon_ms'),
            progress_every_ms=float(engine.get('progress_every_ms', 60000.0)),
            check_invariants=bool(engine.get('check_invariants', False)),
        )

    def step_time(self, batch_size: int, prefill_ms: float = 0.0) -> float:
        return self.base_step_ms + self.per_seq_ms * batch_size + prefill_ms


@dataclass
class Request:
    request_id: str
    app_id: str
    node_id: str
    agent_type: str
    arrival_time: float
    prompt_tokens: int
    output_tokens: int
    call_points: Tuple[int, ...] = ()
    call_latencies: Tuple[float, ...] = ()
    stage_labels: Tuple[str, ...] = ()
    fc_hint: Optional[float] = None
    expected_output: float = 0.0
    generated: int = 0
    state: RequestState = RequestState.WAITING
    residency: CacheResidency = CacheResidency.DEVICE
    call_index: int = 0
    in_call: bool = False
    call_started_at: float = 0.0
    needs_recompute: bool = False
    wait_since: float = 0.0
    admitted_seq: int = 0
    upload_wanted: bool = False
    stall_reported: bool = False
    paused: bool = False
    call_ms: float = 0.0
    timing: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def token_demand(self) -> float:
        return self.prompt_tokens + self.expected_output

    @property
    def fc_label(self) -> str:
        if self.call_index < len(self.stage_labels):
            return self.stage_labels[self.call_index]
        return ''

    @property
    def stalled(self) -> bool:
        return self.in_call

    def footprint(self, block_size: int) -> int:
        return blocks_for_tokens(self.prompt_tokens + self.generated, block_size)


@dataclass
class AppState:
    plan: AppInstancePlan
    done_nodes: set = field(default_factory=set)
    spawned: set = field(default_factory=set)


@dataclass
class SimulationResult:
    trace: List[TraceEvent]
    report: MetricsReport
    truncated: bool
    stats: dict


def call_points_for(output_tokens: int, n_calls: int) -> Tuple[int, ...]:
    """Generated-token counts at which each call starts (output split in n_calls + 1 segments)"""
    if n_calls == 0:
        return ()
    segments = split_chunks(output_tokens, n_calls + 1)
    return tuple(int(x) for x in np.cumsum(segments[:n_calls]))


class SimEngine:
    """One simulated serving engine running one application graph"""

    def __init__(self, config: dict, graph: AppGraph, policy='tokencake', meta: Optional[dict] = None):
        """
        Initialize simulation engine

        Args:
            config: merged configuration dict
            graph: validated AppGraph
            policy: policy name (see Policy)
            meta: run description written into the trace (scenario, qps, seed)
        """
        self.config = config
        self.graph = graph
        self.cfg = EngineConfig.from_config(config, policy)
        self.pool = BlockPool.from_config(config)
        self.time = TimeScheduler(config)
        self.space = SpaceScheduler(config)
        self.time.analyze_graph(graph)
        self.meta = dict(meta or {})
        self.meta.setdefault('policy', self.cfg.policy.value)
        self.meta['app'] = self.meta.get('app', graph.name)
        self.meta['total_blocks'] = self.pool.total_device_blocks

        self.queue = EventQueue()
        self.trace: List[TraceEvent] = []
        self.requests: Dict[str, Request] = {}
        self.apps: Dict[str, AppState] = {}
        self.waiting: List[Request] = []
        self.running: List[Request] = []
        self.resume_queue: List[Request] = []
        self.pending_offloads: List[Tuple[str, object]] = []
        self.due_uploads: List[str] = []
        self.step_in_flight = False
        self._admit_seq = itertools.count(1)
        self._usage_samples: List[Tuple[int, Dict[str, int]]] = []
        self._last_util = None
        self._last_progress = 0.0

        self.stats = {
            'steps': 0,
            'admitted': 0,
            'evictions': 0,
            'self_preemptions': 0,
            'paused_decodes': 0,
            'cache_drops': 0,
            'completed_requests': 0,
            'arrived_apps': 0,
            'completed_apps': 0,
        }

    # ------------------------------------------------------------------
    # Bookkeeping
    # ------------------------------------------------------------------

    def _emit(self, t: float, kind: str, req: Optional[Request] = None, blocks: int = 0,
              app_id: str = '', **extra):
        self.trace.append(TraceEvent(
            t_ms=float(t),
            kind=kind,
            request_id=req.request_id if req else '',
            app_id=req.app_id if req else app_id,
            agent_type=req.agent_type if req else '',
            blocks=int(blocks),
            extra=extra,
        ))

    def _transition(self, req: Request, new_state: RequestState, now: float):
        if new_state not in ALLOWED_TRANSITIONS[req.state]:
            raise RequestStateError(f"{req.request_id}: {req.state.value} -> {new_state.value} not allowed")
        if self.cfg.check_invariants and new_state is RequestState.DECODE:
            host = self.pool.host_held(req.request_id)
            if host or req.residency is not CacheResidency.DEVICE:
                raise RequestStateError(f"{req.request_id} resumes decoding with {host} host blocks "
                                        f"(cache {req.residency.value})")
        req.state = new_state
        req.timing.setdefault(new_state.value, []).append(now)

    def _score(self, req: Request) -> float:
        return self.space.score_of(req.agent_type)

    # ------------------------------------------------------------------
    # Requests and applications
    # ------------------------------------------------------------------

    def _spawn(self, app: AppState, node_id: str, now: float):
        node = self.graph.node(node_id)
        sample = app.plan.samples[node_id]
        stages: Tuple[str, ...] = node.stages if isinstance(node, FuncNode) else ()
        req = Request(
            request_id=f"{app.plan.app_id}/{node_id}",
            app_id=app.plan.app_id,
            node_id=node_id,
            agent_type=node.agent_type,
            arrival_time=now,
            prompt_tokens=sample.prompt_tokens,
            output_tokens=sample.output_tokens,
            call_points=call_points_for(sample.output_tokens, len(stages)),
            call_latencies=sample.call_latencies,
            stage_labels=stages,
            fc_hint=node.predict_time_hint if isinstance(node, FuncNode) else None,
            expected_output=expected_output_tokens(node, self.config),
            wait_since=now,
        )
        req.timing['waiting'] = [now]
        app.spawned.add(node_id)
        self.requests[req.request_id] = req
        self.waiting.append(req)
        self._emit(now, 'request_arrival', req, prompt_tokens=req.prompt_tokens,
                   output_tokens=req.output_tokens)

    def _on_arrival(self, plan: AppInstancePlan, now: float):
        app = self.apps[plan.app_id] = AppState(plan)
        self.stats['arrived_apps'] += 1
        self._emit(now, 'app_arrival', app_id=plan.app_id)
        for node_id in self.graph.entry_ids:
            self._spawn(app, node_id, now)

    def _finish_request(self, req: Request, now: float):
        self.pool.release_all(req.request_id)
        self.pool.forget(req.request_id)
        self._transition(req, RequestState.DONE, now)
        self.stats['completed_requests'] += 1
        self._emit(now, 'request_done', req, exec_ms=now - req.arrival_time - req.call_ms, call_ms=req.call_ms,
                   output_tokens=req.output_tokens)
        del self.requests[req.request_id]

        app = self.apps[req.app_id]
        app.done_nodes.add(req.node_id)
        for succ in self.graph.successors(req.node_id):
            if succ not in app.spawned and all(p in app.done_nodes for p in self.graph.predecessors(succ)):
                self._spawn(app, succ, now)
        if len(app.done_nodes) == len(self.graph.nodes):
            self.stats['completed_apps'] += 1
            self._emit(now, 'app_done', app_id=req.app_id)
            del self.apps[req.app_id]

    # ------------------------------------------------------------------
    # Scheduling cycle
    # ------------------------------------------------------------------

    def engine_step(self, now: float):
        """One scheduling cycle; schedules a StepComplete when some request makes progress"""
        self.space.rescore(self.waiting, self.graph, now)

        for rid in list(self.due_uploads):
            req = self.requests.get(rid)
            if req is None or req.residency is not CacheResidency.HOST:
                self.due_uploads.remove(rid)
                continue
            self._try_upload(req, now)

        pending, self.pending_offloads = self.pending_offloads, []
        for rid, decision in pending:
            req = self.requests.get(rid)
            if req is not None:
                self._launch_offload(req, decision, now)

        batch = list(self.running)
        while self.resume_queue and len(batch) < self.cfg.max_batch_size:
            batch.append(self.resume_queue.pop(0))

        prefill_ms = 0.0
        held_back = self.upload_demand(now)
        ordered = sorted(self.waiting, key=lambda r: (-self._score(r), r.wait_since, r.request_id))
        for req in ordered:
            if len(batch) >= self.cfg.max_batch_size:
                break
            need = req.footprint(self.cfg.block_size)
            if self.pool.available_for(req.agent_type) - need - held_back < self.cfg.watermark_blocks:
                continue
            if not self.pool.allocate(req.request_id, req.agent_type, need).ok:
                continue
            self.waiting.remove(req)
            self._transition(req, RequestState.PREFILL, now)
            req.admitted_seq = next(self._admit_seq)
            req.residency = CacheResidency.DEVICE
            if req.needs_recompute:
                prefill_ms += self.pool.cost_model.recompute_time(need)
            else:
                prefill_ms += req.prompt_tokens / self.cfg.prefill_tokens_per_ms
            batch.append(req)
            self.stats['admitted'] += 1
            self._emit(now, 'admitted', req, blocks=need, recompute=req.needs_recompute)

        growth_order = lambda r: (-self._score(r), r.admitted_seq)
        paused = []
        for req in sorted((r for r in batch if r.state is RequestState.DECODE), key=growth_order):
            if not self._grow(req, batch, now):
                req.paused = True
                paused.append(req)

        # a batch where nobody can move gives up its lowest-ranked member
        while paused and all(r.paused for r in batch):
            victim = min(paused, key=lambda r: (self._score(r), -r.admitted_seq))
            paused.remove(victim)
            victim.paused = False
            self._evict(victim, victim, batch, now)
            self.stats['self_preemptions'] += 1
            for req in list(paused):
                if self._grow(req, batch, now):
                    req.paused = False
                    paused.remove(req)

        self.running = batch
        if not batch:
            return
        if paused:
            self.stats['paused_decodes'] += len(paused)
        moving = len(batch) - len(paused)
        duration = self.cfg.step_time(moving, prefill_ms)
        decoding = sum(1 for r in batch if r.state is RequestState.DECODE and not r.paused)
        self.step_in_flight = True
        self.queue.push(now + duration, EventKind.STEP_COMPLETE, (duration, decoding))
        self.stats['steps'] += 1
        if self.cfg.space_enabled:
            self._usage_samples.append((self.pool.used_blocks, self.pool.usage_by_type()))
            if self.stats['steps'] % self.space.update_period_steps == 0:
                self.queue.push(now, EventKind.PARTITION_UPDATE)

    def _grow(self, req: Request, batch: List[Request], now: float) -> bool:
        """Allocate the block the next token needs; False when the request must pause"""
        need = blocks_for_tokens(req.prompt_tokens + req.generated + 1, self.cfg.block_size) \
            - self.pool.held(req.request_id)
        if need <= 0:
            return True
        if self.pool.allocate(req.request_id, req.agent_type, need).ok:
            return True
        self.evict_for_pressure(req, need, batch, now)
        return self.pool.allocate(req.request_id, req.agent_type, need).ok

    def upload_demand(self, now: float) -> int:
        """Host-resident blocks due back on the device within upload_guard_ms, net of staged blocks"""
        total = 0
        for req in self.requests.values():
            if req.residency not in (CacheResidency.OFFLOADING, CacheResidency.HOST):
                continue
            plan = self.time.plans.get(req.request_id)
            due = (not req.in_call or req.upload_wanted or req.request_id in self.due_uploads
                   or (plan is not None and plan.upload_start - now <= self.cfg.upload_guard_ms))
            if due:
                total += max(0, self.pool.host_held(req.request_id) - self.pool.staged_for(req.request_id))
        return total

    def memory_contended(self, now: float) -> bool:
        """True while some waiting request cannot be admitted"""
        held_back = self.upload_demand(now)
        return any(self.pool.available_for(r.agent_type) - r.footprint(self.cfg.block_size) - held_back
                   < self.cfg.watermark_blocks for r in self.waiting)

    def evict_for_pressure(self, requester: Request, needed: int, batch: List[Request], now: float) -> List[Request]:
        """
        Free blocks for a requester by evicting low-score resident requests

        Candidates are requests holding device blocks outside the batch:
        stalled ones (only when the time scheduler manages stalled caches)
        and resumed ones still queued for a batch slot. Order is ascending
        hybrid score, most recently admitted first. With space scheduling
        on, a candidate whose type outranks the requester's is never taken.
        Victims whose blocks would only refill a reservation the requester
        cannot draw on are skipped.

        Returns:
            evicted requests (empty when the need cannot be met)
        """
        resident = [r for r in self.resume_queue if r not in batch and self.pool.held(r.request_id) > 0]
        if self.cfg.time_enabled:
            resident += [r for r in self.requests.values()
                         if r.in_call and r.state is RequestState.STALLED_FC
                         and r.residency is CacheResidency.DEVICE and self.pool.held(r.request_id) > 0]
        if self.cfg.space_enabled:
            ceiling = self._score(requester)
            resident = [r for r in resident if self._score(r) <= ceiling]
        candidates = sorted(resident, key=lambda r: (self._score(r), -r.admitted_seq))

        gains = [self.pool.gain_if_freed(v.agent_type, self.pool.held(v.request_id), requester.agent_type)
                 for v in candidates]
        if self.pool.available_for(requester.agent_type) + sum(g for g in gains if g > 0) < needed:
            return []

        victims = []
        for victim, gain in zip(candidates, gains):
            if gain <= 0:
                continue
            self._evict(victim, requester, batch, now)
            victims.append(victim)
            if self.pool.available_for(requester.agent_type) >= needed:
                break
        return victims

    def _evict(self, victim: Request, cause: Request, batch: List[Request], now: float):
        blocks = self.pool.release_all(victim.request_id)
        victim.needs_recompute = True
        victim.residency = CacheResidency.DROPPED
        if victim in batch:
            batch.remove(victim)
        if victim in self.resume_queue:
            self.resume_queue.remove(victim)
        self._transition(victim, RequestState.EVICTED, now)
        self.stats['evictions'] += 1
        self._emit(now, 'eviction', victim, blocks=blocks, cause=cause.request_id,
                   cause_type=cause.agent_type, victim_score=self._score(victim),
                   cause_score=self._score(cause))
        if victim is not cause and self.space.check_inversion(victim, cause):
            self._emit(now, 'critical_inversion', victim, blocks=blocks, cause=cause.request_id,
                       cause_type=cause.agent_type)
        if not victim.in_call:
            self._requeue(victim, now)

    def _requeue(self, req: Request, now: float):
        self._transition(req, RequestState.WAITING, now)
        req.wait_since = now
        self.waiting.append(req)

    # ------------------------------------------------------------------
    # Event handlers
    # ------------------------------------------------------------------

    def _on_step_complete(self, payload, now: float):
        duration, decoding = payload
        self.step_in_flight = False
        self.time.meter.record(decoding * self.cfg.decode_tokens_per_step, duration)
        batch, self.running = self.running, []
        for req in batch:
            if req.state is RequestState.PREFILL:
                self._transition(req, RequestState.DECODE, now)
                req.needs_recompute = False
                self.running.append(req)
                continue
            if req.paused:
                req.paused = False
                self.running.append(req)
                continue
            req.generated += self.cfg.decode_tokens_per_step
            if self.on_generation_complete(req, now) is GenerationAction.CONTINUE:
                self.running.append(req)

    def on_generation_complete(self, req: Request, now: float) -> GenerationAction:
        """
        Route a request whose latest segment just produced a token

        Returns:
            DONE when all output tokens exist (successors may spawn), CALL when
            it reached a call point (now StalledFC, CallStart queued), else CONTINUE
        """
        if req.generated >= req.output_tokens:
            self._finish_request(req, now)
            return GenerationAction.DONE
        if req.call_index < len(req.call_points) and req.generated == req.call_points[req.call_index]:
            self._transition(req, RequestState.STALLED_FC, now)
            self.queue.push(now, EventKind.CALL_START, req.request_id)
            return GenerationAction.CALL
        return GenerationAction.CONTINUE

    def _on_call_start(self, rid: str, now: float):
        req = self.requests[rid]
        latency = req.call_latencies[req.call_index]
        req.in_call = True
        req.call_started_at = now
        self.queue.push(now + latency, EventKind.CALL_FINISH, (rid, latency))
        held = self.pool.held(rid)
        self._emit(now, 'call_start', req, blocks=held, label=req.fc_label, latency_ms=latency)

        if self.cfg.evict_on_call:
            self.pool.release_all(rid)
            req.residency = CacheResidency.DROPPED
            req.needs_recompute = True
            self._transition(req, RequestState.EVICTED, now)
            self.stats['cache_drops'] += 1
            self._emit(now, 'cache_dropped', req, blocks=held)
            return
        if not self.cfg.time_enabled:
            return
        if not self.memory_contended(now):
            self._emit(now, 'offload_decided', req, blocks=held, decision='retain', reason='no memory pressure')
            return
        decision = self.time.decide(req, self.waiting, self.pool)
        self._emit(now, 'offload_decided', req, blocks=decision.n_blocks, decision=decision.decision,
                   t_fc=decision.t_fc, t_transfer=decision.t_transfer, n_capacity=decision.n_capacity,
                   matched=decision.matched_waiting_request or '', reason=decision.reason)
        if decision.offload:
            self.pending_offloads.append((rid, decision))

    def _launch_offload(self, req: Request, decision, now: float):
        held = self.pool.held(req.request_id)
        if not req.in_call or req.residency is not CacheResidency.DEVICE or held == 0:
            return
        ticket = self.pool.offload_blocks(req.request_id, held, now)
        if ticket is None:
            self._emit(now, 'offload_refused', req, blocks=held)
            return
        req.residency = CacheResidency.OFFLOADING
        self._transition(req, RequestState.OFFLOADED, now)
        self._emit(now, 'offload_started', req, blocks=held, fresh_host_blocks=ticket.fresh_host_blocks)
        self.queue.push(ticket.done_time, EventKind.TRANSFER_DONE, ticket)

        decision.n_blocks = held
        plan = self.time.plan_upload(decision, self.pool, now, req.call_started_at, ticket.done_time,
                                     req.agent_type)
        if plan.reservation is not None:
            for t in plan.reservation.tick_times:
                self.queue.push(t, EventKind.RESERVATION_TICK, (req.request_id, 'tick'))
        self.queue.push(plan.upload_start, EventKind.RESERVATION_TICK, (req.request_id, 'upload_due'))

    def _try_upload(self, req: Request, now: float) -> bool:
        n = self.pool.host_held(req.request_id)
        plan = self.time.plans.get(req.request_id)
        reservation = plan.reservation if plan is not None else None
        ticket = self.pool.upload_blocks(req.request_id, n, now, reservation=reservation)
        if ticket is None:
            if req.request_id not in self.due_uploads:
                self.due_uploads.append(req.request_id)
            if not req.stall_reported:
                req.stall_reported = True
                self._emit(now, 'upload_stall', req, blocks=n,
                           available=self.pool.available_for(req.agent_type))
            return False
        if req.request_id in self.due_uploads:
            self.due_uploads.remove(req.request_id)
        if plan is not None:
            plan.launched = True
        req.stall_reported = False
        req.residency = CacheResidency.UPLOADING
        self._transition(req, RequestState.UPLOADING, now)
        self._emit(now, 'upload_started', req, blocks=n, from_staged=ticket.from_staged)
        self.queue.push(ticket.done_time, EventKind.TRANSFER_DONE, ticket)
        return True

    def _on_transfer_done(self, ticket, now: float):
        req = self.requests.get(ticket.request_id)
        if ticket.direction is TransferDirection.OFFLOAD:
            self.pool.complete_offload(ticket)
            if req is None:
                return
            req.residency = CacheResidency.HOST
            self._emit(now, 'offload_done', req, blocks=ticket.n_blocks)
            if req.upload_wanted:
                req.upload_wanted = False
                self._try_upload(req, now)
            return

        self.pool.complete_upload(ticket)
        if req is None:
            return
        req.residency = CacheResidency.DEVICE
        self._emit(now, 'upload_done', req, blocks=ticket.n_blocks)
        if req.in_call:
            self._transition(req, RequestState.STALLED_FC, now)
        else:
            self._transition(req, RequestState.DECODE, now)
            self.resume_queue.append(req)

    def _on_reservation_tick(self, payload, now: float):
        rid, what = payload
        req = self.requests.get(rid)
        plan = self.time.plans.get(rid)
        if req is None or plan is None or not req.in_call or \
                req.residency not in (CacheResidency.OFFLOADING, CacheResidency.HOST):
            return
        if what == 'tick':
            if plan.reservation is not None:
                taken = self.pool.tick_reservation(plan.reservation, now, keep_free=self.cfg.watermark_blocks)
                self._emit(now, 'reservation_tick', req, blocks=taken,
                           readiness=plan.reservation.readiness)
        elif req.residency is CacheResidency.HOST:
            self._try_upload(req, now)
        else:
            req.upload_wanted = True

    def _on_call_finish(self, payload, now: float):
        rid, observed = payload
        req = self.requests.get(rid)
        action, timing = self.time.handle_call_finish(req, now, observed)
        req.in_call = False
        req.call_ms += observed
        self._emit(now, 'call_finish', req, blocks=self.pool.held(rid), label=req.fc_label,
                   observed_ms=observed, action=action.value)
        if timing in ('early', 'late'):
            self._emit(now, f'call_finish_{timing}', req)
        req.call_index += 1

        if action is FinishAction.RESUME_NOW:
            self._transition(req, RequestState.DECODE, now)
            self.resume_queue.append(req)
        elif action is FinishAction.UPLOAD_NOW:
            self._try_upload(req, now)
        elif action is FinishAction.UPLOAD_AFTER_OFFLOAD:
            req.upload_wanted = True
        elif action is FinishAction.RECOMPUTE:
            self._requeue(req, now)

    def _on_partition_update(self, now: float):
        samples, self._usage_samples = self._usage_samples, []
        if not samples:
            return
        usage = float(np.mean([s[0] for s in samples]))
        types = sorted({t for _, by_type in samples for t in by_type})
        type_usage = {t: float(np.mean([by_type.get(t, 0) for _, by_type in samples])) for t in types}
        plan, changed = self.space.update(self.pool, usage, type_usage)
        self._emit(now, 'partition_updated', ratio=plan.total_reserve_ratio, r_total=plan.r_total,
                   reserve_num=dict(plan.reserve_num))
        if changed:
            self._emit(now, 'critical_set_changed', critical=list(plan.critical_set))

    # ------------------------------------------------------------------
    # Main loop
    # ------------------------------------------------------------------

    def _sample_util(self, now: float):
        active = sum(self.pool.held(r.request_id) for r in self.running + self.resume_queue)
        stalled = sum(self.pool.held(r.request_id) for r in self.requests.values()
                      if r.in_call and r.residency is CacheResidency.DEVICE)
        sample = (self.pool.used_blocks, active, stalled)
        if sample != self._last_util:
            self._last_util = sample
            self._emit(now, 'util', used=sample[0], active=active, stalled=stalled,
                       total=self.pool.total_device_blocks)

    def _progress(self, now: float):
        if now - self._last_progress < self.cfg.progress_every_ms:
            return
        self._last_progress = now
        logger.info(f"[{self.cfg.policy.value}] t={now / 1000.0:.1f}s apps {self.stats['completed_apps']}/"
                    f"{self.stats['arrived_apps']} waiting={len(self.waiting)} running={len(self.running)} "
                    f"free={self.pool.device_free}/{self.pool.total_device_blocks}")

    def _dispatch(self, kind: EventKind, payload, now: float):
        if kind is EventKind.ARRIVAL:
            self._on_arrival(payload, now)
        elif kind is EventKind.STEP_COMPLETE:
            self._on_step_complete(payload, now)
        elif kind is EventKind.CALL_START:
            self._on_call_start(payload, now)
        elif kind is EventKind.CALL_FINISH:
            self._on_call_finish(payload, now)
        elif kind is EventKind.TRANSFER_DONE:
            self._on_transfer_done(payload, now)
        elif kind is EventKind.RESERVATION_TICK:
            self._on_reservation_tick(payload, now)
        elif kind is EventKind.PARTITION_UPDATE:
            self._on_partition_update(now)

    def run(self, workload: List[AppInstancePlan]) -> SimulationResult:
        """
        Simulate a pre-sampled workload to completion or the horizon

        Returns:
            SimulationResult (trace, aggregated report, truncated flag, stats)
        """
        self._emit(0.0, 'run_meta', **self.meta)
        for plan in workload:
            self.queue.push(plan.arrival_ms, EventKind.ARRIVAL, plan)
        horizon = self.cfg.horizon_ms
        now = 0.0

        while len(self.queue):
            if horizon is not None and self.queue.peek_time() > horizon:
                now = float(horizon)
                break
            now, kind, payload = self.queue.pop()
            self._dispatch(kind, payload, now)
            if self.cfg.check_invariants:
                self.pool.check_invariants()
            next_t = self.queue.peek_time()
            if next_t is None or next_t > now:
                if not self.step_in_flight:
                    self.engine_step(now)
                    if self.cfg.check_invariants:
                        self.pool.check_invariants()
                self._sample_util(now)
                self._progress(now)

        truncated = bool(self.apps) or len(self.queue) > 0
        if truncated:
            self._emit(now, 'truncated', live_apps=len(self.apps), live_requests=len(self.requests))
            logger.warning(f"[{self.cfg.policy.value}] run truncated at t={now / 1000.0:.1f}s with "
                           f"{len(self.apps)} unfinished apps")

        report = aggregate(self.trace)
        logger.debug(f"[{self.cfg.policy.value}] done: {self.stats['completed_apps']} apps, "
                     f"{self.stats['steps']} steps, avg e2e {report.avg_e2e_latency_ms:.1f} ms")
        return SimulationResult(self.trace, report, truncated, self.get_stats())

    def get_stats(self) -> dict:
        stats = self.stats.copy()
        stats['pool'] = self.pool.get_stats()
        stats['time_scheduler'] = self.time.get_stats()
        stats['space_scheduler'] = self.space.get_stats()
        return stats


def run(scenario: Scenario, policy='tokencake') -> SimulationResult:
    """Run one scenario under one policy"""
    graph = scenario.graph()
    workload = generate_workload(scenario, graph)
    engine = SimEngine(scenario.config, graph, policy,
                       meta={'scenario': scenario.name, 'app': scenario.app, 'policy': str(Policy(policy).value),
                             'qps': scenario.qps, 'seed': scenario.seed})
    return engine.run(workload)
