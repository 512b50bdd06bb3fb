#!/usr/bin/env python3
"""
Experiments - Policy runs, QPS sweeps and micro-benchmarks

- run_policy: one (scenario, policy, seed) simulation, optionally saving its trace
- run_sweep: QPS grid x policies x seeds, in parallel worker processes;
  results come back ordered by (scenario, policy, qps, seed) so the number
  of workers never changes the output
- microbench: repeated offload/upload cycles of one large request under
  heavy device occupancy, for {host buffer on/off} x {gradual on/off}
- calibration_table: transfer vs recompute cost over a block grid
"""

import asyncio
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dataclasses_json import dataclass_json
from loguru import logger

from src.block_memory import BlockPool, TransferCostModel, TransferDirection
from src.metrics import MetricsReport, trace_digest, write_trace_jsonl
from src.sim_engine import Policy, run
from src.workload import Scenario


DEFAULT_POLICIES = ('tokencake', 'retain', 'evict')


@dataclass
class RunOutcome:
    scenario: str
    policy: str
    qps: float
    seed: int
    report: MetricsReport
    digest: str
    truncated: bool
    trace_path: Optional[str] = None


def run_policy(scenario: Scenario, policy: str, out_dir: Optional[Path] = None) -> RunOutcome:
    """
    Run one scenario under one policy

    Args:
        scenario: Scenario (qps and seed already set)
        policy: policy name
        out_dir: when given, the trace is written to
            <out_dir>/traces/<policy>_qps<qps>_seed<seed>.jsonl

    Returns:
        RunOutcome
    """
    result = run(scenario, policy)
    trace_path = None
    if out_dir is not None:
        name = f"{Policy(policy).value}_qps{scenario.qps:g}_seed{scenario.seed}.jsonl"
        trace_path = str(write_trace_jsonl(result.trace, Path(out_dir) / 'traces' / name))
    return RunOutcome(scenario.name, Policy(policy).value, scenario.qps, scenario.seed,
                      result.report, trace_digest(result.trace), result.truncated, trace_path)


def _sweep_worker(args) -> RunOutcome:
    scenario, policy, out_dir = args
    return run_policy(scenario, policy, out_dir)


def sweep_tasks(scenario: Scenario, qps_grid: Sequence[float], policies: Sequence[str],
                seeds: Sequence[int]) -> List[tuple]:
    """Cartesian (scenario, policy) tasks in output order"""
    tasks = []
    for policy in policies:
        Policy(policy)
        for qps in qps_grid:
            for seed in seeds:
                tasks.append((scenario.with_params(qps=qps, seed=seed), policy))
    return tasks


async def run_sweep_async(scenario: Scenario, qps_grid: Sequence[float], policies: Sequence[str] = DEFAULT_POLICIES,
                          seeds: Sequence[int] = (1,), workers: int = 1,
                          out_dir: Optional[Path] = None) -> List[RunOutcome]:
    """
    Run a QPS x policy x seed sweep

    Returns:
        RunOutcome list ordered by (policy, qps, seed) in the order given
    """
    tasks = [(s, p, out_dir) for s, p in sweep_tasks(scenario, qps_grid, policies, seeds)]
    logger.info(f"Sweep '{scenario.name}': {len(tasks)} runs on {workers} worker(s)")

    if workers <= 1:
        outcomes = []
        for task in tasks:
            outcomes.append(_sweep_worker(task))
            logger.debug(f"  {task[1]} qps={task[0].qps:g} seed={task[0].seed} done")
        return outcomes

    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [loop.run_in_executor(pool, _sweep_worker, task) for task in tasks]
        outcomes = await asyncio.gather(*futures)
    return list(outcomes)


def run_sweep(scenario: Scenario, qps_grid: Sequence[float], policies: Sequence[str] = DEFAULT_POLICIES,
              seeds: Sequence[int] = (1,), workers: int = 1, out_dir: Optional[Path] = None) -> List[RunOutcome]:
    return asyncio.run(run_sweep_async(scenario, qps_grid, policies, seeds, workers, out_dir))


# ----------------------------------------------------------------------
# Offload / upload micro-benchmark
# ----------------------------------------------------------------------

@dataclass_json
@dataclass
class MicrobenchRow:
    host_buffer: bool
    gradual: bool
    cycle: int
    fresh_host_acquisitions: int
    fresh_host_blocks: int
    upload_stalls: int
    overhead_ms: float
    offload_ms: float
    upload_ms: float


def _refill_background(pool: BlockPool, target_used: int):
    """Background requests grab shared blocks until device usage reaches target_used"""
    want = min(pool.shared_free, target_used - pool.used_blocks)
    if want > 0:
        pool.allocate('background', 'background', want)


def microbench_cycles(n_blocks: int = 5120, cycles: int = 5, occupancy: float = 0.9,
                      device_blocks: int = 16384, host_buffer: bool = True, gradual: bool = True,
                      host_alloc_ms_per_block: float = 2.96, reservation_cycles: int = 4,
                      cost_model: Optional[TransferCostModel] = None) -> List[MicrobenchRow]:
    """
    Repeated offload/upload of one n-block request under background load

    Background requests hold the device at `occupancy` and churn one
    reservation chunk per tick: they free blocks and greedily re-take
    whatever shared blocks are left. Gradual reservation claims freed
    blocks before the background does; all-at-once allocation only sees
    what the background left over.

    Returns:
        one MicrobenchRow per cycle
    """
    if not 0.0 < occupancy < 1.0:
        raise ValueError(f"occupancy must be in (0, 1) (got {occupancy})")
    target_used = int(occupancy * device_blocks)
    if n_blocks >= target_used:
        raise ValueError(f"n_blocks {n_blocks} must be below the occupied share {target_used}")
    pool = BlockPool(device_blocks, n_blocks * 2, cost_model or TransferCostModel(),
                     host_buffer_enabled=host_buffer, host_alloc_ms_per_block=host_alloc_ms_per_block)
    churn = int(math.ceil(n_blocks / reservation_cycles))

    pool.allocate('cycler', 'cycler', n_blocks)
    _refill_background(pool, target_used)

    rows = []
    now = 0.0
    for cycle in range(1, cycles + 1):
        offload = pool.offload_blocks('cycler', n_blocks, now)
        now = offload.done_time
        pool.complete_offload(offload)
        _refill_background(pool, target_used)

        stalls_before = pool.stats['upload_stalls']
        reservation = None
        if gradual:
            reservation = pool.begin_gradual_reservation('cycler', n_blocks, now, now + reservation_cycles,
                                                         cycles=reservation_cycles, agent_type='cycler')
        for tick in range(1, reservation_cycles + 1):
            pool.free('background', min(churn, pool.held('background')))
            if reservation is not None:
                pool.tick_reservation(reservation, now + tick)
            _refill_background(pool, target_used)
        now += reservation_cycles

        upload = pool.upload_blocks('cycler', n_blocks, now, reservation=reservation)
        if upload is None:
            # the background yields just enough blocks to let the upload through
            short = n_blocks - pool.shared_free
            pool.free('background', min(short, pool.held('background')))
            upload = pool.upload_blocks('cycler', n_blocks, now, reservation=reservation)
        now = upload.done_time
        pool.complete_upload(upload)
        pool.check_invariants()

        rows.append(MicrobenchRow(
            host_buffer=host_buffer,
            gradual=gradual,
            cycle=cycle,
            fresh_host_acquisitions=1 if offload.fresh_host_blocks else 0,
            fresh_host_blocks=offload.fresh_host_blocks,
            upload_stalls=pool.stats['upload_stalls'] - stalls_before,
            overhead_ms=offload.overhead_ms,
            offload_ms=offload.duration,
            upload_ms=upload.duration,
        ))
    return rows


def microbench(config: dict) -> List[MicrobenchRow]:
    """All four {buffer} x {gradual} modes with parameters from the 'microbench' section"""
    section = config.get('microbench', {})
    params = dict(
        n_blocks=int(section.get('n_blocks', 5120)),
        cycles=int(section.get('cycles', 5)),
        occupancy=float(section.get('occupancy', 0.9)),
        device_blocks=int(section.get('device_blocks', 16384)),
        host_alloc_ms_per_block=float(section.get('host_alloc_ms_per_block', 2.96)),
        reservation_cycles=int(config.get('time_scheduler', {}).get('gradual_cycles', 4)),
        cost_model=TransferCostModel.from_config(config),
    )
    rows = []
    for host_buffer in (True, False):
        for gradual in (True, False):
            rows.extend(microbench_cycles(host_buffer=host_buffer, gradual=gradual, **params))
    return rows


def summarize_microbench(rows: Sequence[MicrobenchRow]) -> List[Dict[str, object]]:
    summary = []
    modes = list(dict.fromkeys((r.host_buffer, r.gradual) for r in rows))
    for host_buffer, gradual in modes:
        group = [r for r in rows if (r.host_buffer, r.gradual) == (host_buffer, gradual)]
        summary.append({
            'host_buffer': host_buffer,
            'gradual': gradual,
            'cycles': len(group),
            'fresh_acquisitions_after_first': sum(r.fresh_host_acquisitions for r in group[1:]),
            'upload_stalls': sum(r.upload_stalls for r in group),
            'overhead_ms': sum(r.overhead_ms for r in group),
        })
    return summary


# ----------------------------------------------------------------------
# Transfer vs recompute calibration
# ----------------------------------------------------------------------

@dataclass_json
@dataclass
class CalibrationRow:
    blocks: int
    offload_ms: float
    upload_ms: float
    roundtrip_ms: float
    recompute_ms: float
    ratio: float


def calibration_table(model: TransferCostModel,
                      block_grid: Sequence[int] = (256, 512, 1024, 2048, 4096, 8192)) -> List[CalibrationRow]:
    rows = []
    for blocks in block_grid:
        roundtrip = model.transfer_time(blocks, TransferDirection.ROUNDTRIP)
        recompute = model.recompute_time(blocks)
        rows.append(CalibrationRow(
            blocks=blocks,
            offload_ms=model.transfer_time(blocks, TransferDirection.OFFLOAD),
            upload_ms=model.transfer_time(blocks, TransferDirection.UPLOAD),
            roundtrip_ms=roundtrip,
            recompute_ms=recompute,
            ratio=recompute / roundtrip if roundtrip > 0 else float('inf'),
        ))
    return rows
