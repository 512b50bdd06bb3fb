#!/usr/bin/env python3
"""
Block Memory - Block-granular KV-cache accounting for device and host pools

Tracks, per simulated engine:
- device blocks: free, in use per request, claimed against per-agent-type
  reservations, staged for upcoming uploads, pending free (offload in flight)
- host blocks: in use per request, plus a free list of buffered host blocks
  that later offloads reuse before acquiring fresh host capacity
- the transfer / recompute cost model (linear in block count)

Device accounting identity, checked after every operation in tests:
    shared_free + sum(used) + reserved_unclaimed + sum(staged) + pending_free
        == total_device_blocks
where shared_free + reserved_unclaimed == device_free (physically free).

All mutations happen from the simulation loop in event order; no locking.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

from loguru import logger


class BlockAccountingError(RuntimeError):
    """Raised when an operation would break block accounting"""


class InsufficientBlocksError(ValueError):
    """Raised for a malformed block request (zero or negative count)"""


class TransferDirection(str, Enum):
    OFFLOAD = 'offload'
    UPLOAD = 'upload'
    ROUNDTRIP = 'roundtrip'


REFERENCE_BLOCKS = 4096


class TransferCostModel:
    """
    Linear transfer / recompute cost model

    Calibration: a 4096-block round trip (offload + upload) takes 60 ms and
    recomputing 4096 blocks takes 9000 ms. The round trip is split between
    offload and upload by offload_fraction (symmetric by default).
    """

    def __init__(self, roundtrip_ms_per_4096_blocks: float = 60.0,
                 offload_fraction: float = 0.5,
                 recompute_ms_per_4096_blocks: float = 9000.0):
        if not roundtrip_ms_per_4096_blocks > 0 or not recompute_ms_per_4096_blocks > 0:
            raise ValueError("Transfer and recompute calibration must be > 0")
        if not 0.0 < offload_fraction < 1.0:
            raise ValueError(f"offload_fraction must be in (0, 1) (got {offload_fraction})")
        self.roundtrip_ms_per_4096_blocks = float(roundtrip_ms_per_4096_blocks)
        self.offload_fraction = float(offload_fraction)
        self.recompute_ms_per_4096_blocks = float(recompute_ms_per_4096_blocks)

    @classmethod
    def from_config(cls, config: dict) -> 'TransferCostModel':
        mem = config.get('memory', {})
        return cls(
            roundtrip_ms_per_4096_blocks=mem.get('roundtrip_ms_per_4096_blocks', 60.0),
            offload_fraction=mem.get('offload_fraction', 0.5),
            recompute_ms_per_4096_blocks=mem.get('recompute_ms_per_4096_blocks', 9000.0),
        )

    @property
    def split(self):
        return (self.offload_fraction, 1.0 - self.offload_fraction)

    def transfer_time(self, n_blocks: int, direction='roundtrip') -> float:
        """Transfer duration in ms for n_blocks in the given direction"""
        if n_blocks < 0:
            raise ValueError(f"n_blocks must be >= 0 (got {n_blocks})")
        roundtrip = self.roundtrip_ms_per_4096_blocks * n_blocks / REFERENCE_BLOCKS
        direction = TransferDirection(direction)
        if direction is TransferDirection.OFFLOAD:
            return roundtrip * self.offload_fraction
        if direction is TransferDirection.UPLOAD:
            return roundtrip * (1.0 - self.offload_fraction)
        return roundtrip

    def recompute_time(self, n_blocks: int) -> float:
        """Recompute duration in ms for n_blocks"""
        if n_blocks < 0:
            raise ValueError(f"n_blocks must be >= 0 (got {n_blocks})")
        return self.recompute_ms_per_4096_blocks * n_blocks / REFERENCE_BLOCKS


def transfer_time(model: TransferCostModel, n_blocks: int, direction='roundtrip') -> float:
    return model.transfer_time(n_blocks, direction)


def recompute_time(model: TransferCostModel, n_blocks: int) -> float:
    return model.recompute_time(n_blocks)


def blocks_for_tokens(tokens: int, block_size: int) -> int:
    return int(math.ceil(tokens / block_size)) if tokens > 0 else 0


@dataclass
class ReservationEntry:
    """Per-agent-type reservation: target from the partition plan, claimed usage"""
    agent_type: str
    reserved_blocks: int = 0
    claimed_blocks: int = 0
    target_blocks: int = 0

    @property
    def unclaimed(self) -> int:
        return self.reserved_blocks - self.claimed_blocks


@dataclass
class AllocationResult:
    ok: bool
    request_id: str
    n_blocks: int
    from_reservation: int = 0
    from_shared: int = 0
    reason: str = ''


@dataclass
class TransferTicket:
    ticket_id: int
    request_id: str
    direction: TransferDirection
    n_blocks: int
    start_time: float
    done_time: float
    fresh_host_blocks: int = 0
    from_staged: int = 0
    overhead_ms: float = 0.0

    @property
    def duration(self) -> float:
        return self.done_time - self.start_time


@dataclass
class GradualReservation:
    """Device blocks claimed in chunks at successive ticks ahead of an upload"""
    request_id: str
    agent_type: str
    n_blocks: int
    start_time: float
    deadline: float
    cycles: int
    chunks: List[int] = field(default_factory=list)
    tick_times: List[float] = field(default_factory=list)
    next_chunk: int = 0
    claimed: int = 0
    carry: int = 0
    cancelled: bool = False

    @property
    def readiness(self) -> float:
        if self.n_blocks == 0:
            return 1.0
        return self.claimed / self.n_blocks

    @property
    def ready(self) -> bool:
        return self.claimed >= self.n_blocks

    @property
    def finished_ticks(self) -> bool:
        return self.next_chunk >= len(self.chunks)


def split_chunks(n_blocks: int, cycles: int) -> List[int]:
    """Near-equal split, larger chunks first (10 over 3 -> 4/3/3)"""
    base, rem = divmod(n_blocks, cycles)
    return [base + 1] * rem + [base] * (cycles - rem)


class BlockPool:
    """Device + host block pools with reservations and a host free-list buffer"""

    def __init__(self, total_device_blocks: int, total_host_blocks: int,
                 cost_model: Optional[TransferCostModel] = None,
                 host_buffer_enabled: bool = True,
                 host_alloc_ms_per_block: float = 0.0):
        """
        Initialize block pool

        Args:
            total_device_blocks: KV-cache blocks on the device
            total_host_blocks: host swap capacity in blocks
            cost_model: TransferCostModel for ticket durations
            host_buffer_enabled: keep freed host blocks on an internal free list
            host_alloc_ms_per_block: modeled cost of acquiring fresh host capacity
        """
        if total_device_blocks < 1 or total_host_blocks < 0:
            raise ValueError("Pool sizes must be positive")
        self.total_device_blocks = int(total_device_blocks)
        self.total_host_blocks = int(total_host_blocks)
        self.cost_model = cost_model or TransferCostModel()
        self.host_buffer_enabled = host_buffer_enabled
        self.host_alloc_ms_per_block = float(host_alloc_ms_per_block)

        self.device_free = self.total_device_blocks
        self.device_used: Dict[str, int] = {}
        self.owner_type: Dict[str, str] = {}
        self.reserved: Dict[str, ReservationEntry] = {}
        self.staged: Dict[str, int] = {}
        self.pending_free = 0
        self.host_free_list = 0
        self.host_in_use: Dict[str, int] = {}

        self._next_ticket = 0

        self.stats = {
            'allocations': 0,
            'allocation_failures': 0,
            'frees': 0,
            'offloads': 0,
            'offload_refusals': 0,
            'uploads': 0,
            'upload_stalls': 0,
            'host_acquisitions': 0,
            'host_acquired_blocks': 0,
            'host_buffer_hits': 0,
            'reservation_ticks': 0,
        }

        logger.debug(f"BlockPool initialized: {self.total_device_blocks} device / "
                     f"{self.total_host_blocks} host blocks (buffer {'on' if host_buffer_enabled else 'off'})")

    @classmethod
    def from_config(cls, config: dict) -> 'BlockPool':
        mem = config.get('memory', {})
        total_host = mem.get('total_host_blocks')
        if total_host is None:
            block_bytes = mem.get('block_bytes', 3 * 1024 * 1024)
            total_host = int(mem.get('host_capacity_gb', 100) * 1024 ** 3 // block_bytes)
        return cls(
            total_device_blocks=mem.get('total_device_blocks', 2048),
            total_host_blocks=total_host,
            cost_model=TransferCostModel.from_config(config),
            host_buffer_enabled=mem.get('host_buffer_enabled', True),
            host_alloc_ms_per_block=mem.get('host_alloc_ms_per_block', 0.0),
        )

    # ------------------------------------------------------------------
    # Views
    # ------------------------------------------------------------------

    @property
    def reserved_unclaimed(self) -> int:
        """Unclaimed reservation currently backed by free blocks"""
        total = sum(max(0, e.unclaimed) for e in self.reserved.values())
        return min(total, self.device_free)

    @property
    def shared_free(self) -> int:
        return self.device_free - self.reserved_unclaimed

    @property
    def used_blocks(self) -> int:
        return self.total_device_blocks - self.device_free

    @property
    def host_unallocated(self) -> int:
        return self.total_host_blocks - sum(self.host_in_use.values()) - self.host_free_list

    def host_capacity(self) -> int:
        return self.host_free_list + self.host_unallocated

    def is_critical(self, agent_type: str) -> bool:
        entry = self.reserved.get(agent_type)
        return entry is not None and entry.unclaimed > 0

    def available_for(self, agent_type: str) -> int:
        """Blocks an agent type could allocate right now"""
        entry = self.reserved.get(agent_type)
        own = max(0, entry.unclaimed) if entry is not None else 0
        return min(self.device_free, self.shared_free + own)

    def held(self, request_id: str) -> int:
        return self.device_used.get(request_id, 0)

    def host_held(self, request_id: str) -> int:
        return self.host_in_use.get(request_id, 0)

    def staged_for(self, request_id: str) -> int:
        return self.staged.get(request_id, 0)

    def gain_if_freed(self, owner_type: str, n_blocks: int, requester_type: str) -> int:
        """Blocks `requester_type` could use if `owner_type` freed n blocks"""
        entry = self.reserved.get(owner_type)
        if entry is None or owner_type == requester_type:
            return n_blocks
        claimed_after = entry.claimed_blocks - min(n_blocks, entry.claimed_blocks)
        unclaimed_after = max(entry.target_blocks, claimed_after) - claimed_after
        return n_blocks - (unclaimed_after - max(0, entry.unclaimed))

    def usage_by_type(self) -> Dict[str, int]:
        usage: Dict[str, int] = {}
        for rid, n in self.device_used.items():
            t = self.owner_type.get(rid, '')
            usage[t] = usage.get(t, 0) + n
        return usage

    # ------------------------------------------------------------------
    # Device allocation
    # ------------------------------------------------------------------

    def _take(self, agent_type: str, n_blocks: int) -> Optional[int]:
        """Draw n blocks for a type, reservation first; returns blocks drawn from the reservation"""
        entry = self.reserved.get(agent_type)
        from_res = 0
        if entry is not None and entry.unclaimed > 0:
            from_res = min(n_blocks, entry.unclaimed, self.device_free)
        if n_blocks - from_res > self.shared_free:
            return None
        self.device_free -= n_blocks
        if from_res:
            entry.claimed_blocks += from_res
        return from_res

    def _give_back(self, agent_type: str, n_blocks: int):
        """Return blocks to the free pool, refilling the type's reservation first"""
        self.device_free += n_blocks
        entry = self.reserved.get(agent_type)
        if entry is None:
            return
        entry.claimed_blocks -= min(n_blocks, entry.claimed_blocks)
        entry.reserved_blocks = max(entry.target_blocks, entry.claimed_blocks)
        if entry.reserved_blocks == 0 and entry.target_blocks == 0:
            del self.reserved[agent_type]

    def allocate(self, request_id: str, agent_type: str, n_blocks: int) -> AllocationResult:
        """
        Allocate device blocks for a request

        Critical types (with unclaimed reservation) draw from their reservation
        first, then the shared pool. Everyone else only sees the shared pool.

        Returns:
            AllocationResult (ok=False with reason 'insufficient' leaves the pool unchanged)
        """
        if not request_id:
            raise KeyError("allocate needs a request id")
        if n_blocks < 1:
            raise InsufficientBlocksError(f"n_blocks must be >= 1 (got {n_blocks})")
        from_res = self._take(agent_type, n_blocks)
        if from_res is None:
            self.stats['allocation_failures'] += 1
            return AllocationResult(False, request_id, n_blocks, reason='insufficient')
        self.device_used[request_id] = self.device_used.get(request_id, 0) + n_blocks
        self.owner_type[request_id] = agent_type
        self.stats['allocations'] += 1
        return AllocationResult(True, request_id, n_blocks, from_reservation=from_res,
                                from_shared=n_blocks - from_res)

    def free(self, request_id: str, n_blocks: int):
        """Release n device blocks held by a request"""
        if n_blocks < 1:
            raise InsufficientBlocksError(f"free needs n_blocks >= 1 (got {n_blocks})")
        held = self.device_used.get(request_id, 0)
        if n_blocks > held:
            raise BlockAccountingError(f"{request_id} frees {n_blocks} blocks but holds {held}")
        if n_blocks == held:
            del self.device_used[request_id]
        else:
            self.device_used[request_id] = held - n_blocks
        self._give_back(self.owner_type.get(request_id, ''), n_blocks)
        self.stats['frees'] += 1
        return self

    def release_all(self, request_id: str) -> int:
        """Drop everything a request holds on device (used + staged) and host; returns device blocks freed"""
        freed = 0
        held = self.device_used.get(request_id, 0)
        if held:
            self.free(request_id, held)
            freed += held
        staged = self.staged.pop(request_id, 0)
        if staged:
            self._give_back(self.owner_type.get(request_id, ''), staged)
            freed += staged
        host = self.host_in_use.pop(request_id, 0)
        if host and self.host_buffer_enabled:
            self.host_free_list += host
        return freed

    def forget(self, request_id: str):
        """Drop bookkeeping of a request that holds nothing anymore"""
        if self.device_used.get(request_id) or self.staged.get(request_id) or self.host_in_use.get(request_id):
            raise BlockAccountingError(f"{request_id} still holds blocks")
        self.owner_type.pop(request_id, None)

    def set_reservations(self, reserve_num: Dict[str, int]):
        """
        Apply partition targets; shrinking reservations are lazy

        Claimed blocks above a shrunken target are not revoked, the
        reservation follows them down as they free.
        """
        for agent_type, entry in list(self.reserved.items()):
            if agent_type not in reserve_num:
                entry.target_blocks = 0
                entry.reserved_blocks = entry.claimed_blocks
                if entry.reserved_blocks == 0:
                    del self.reserved[agent_type]
        for agent_type in sorted(reserve_num):
            target = max(0, int(reserve_num[agent_type]))
            entry = self.reserved.get(agent_type)
            if entry is None:
                if target == 0:
                    continue
                entry = self.reserved[agent_type] = ReservationEntry(agent_type)
            entry.target_blocks = target
            entry.reserved_blocks = max(target, entry.claimed_blocks)
            if entry.reserved_blocks == 0:
                del self.reserved[agent_type]

    # ------------------------------------------------------------------
    # Offload / upload
    # ------------------------------------------------------------------

    def _ticket(self, request_id, direction, n_blocks, now, duration, **extra) -> TransferTicket:
        self._next_ticket += 1
        return TransferTicket(self._next_ticket, request_id, direction, n_blocks,
                              now, now + duration, **extra)

    def offload_blocks(self, request_id: str, n_blocks: int, now: float = 0.0) -> Optional[TransferTicket]:
        """
        Start moving n device blocks of a request to host memory

        Host blocks come from the free-list buffer first, then from fresh host
        capacity. Device blocks sit in pending_free until complete_offload().

        Returns:
            TransferTicket, or None if host capacity is exhausted (pool unchanged)
        """
        held = self.device_used.get(request_id, 0)
        if n_blocks < 1 or n_blocks > held:
            raise BlockAccountingError(f"{request_id} offloads {n_blocks} blocks but holds {held}")
        if self.host_capacity() < n_blocks:
            self.stats['offload_refusals'] += 1
            logger.warning(f"Offload refused for {request_id}: host capacity {self.host_capacity()} < {n_blocks}")
            return None

        from_buffer = min(n_blocks, self.host_free_list)
        fresh = n_blocks - from_buffer
        self.host_free_list -= from_buffer
        self.stats['host_buffer_hits'] += from_buffer
        if fresh:
            self.stats['host_acquisitions'] += 1
            self.stats['host_acquired_blocks'] += fresh
        self.host_in_use[request_id] = self.host_in_use.get(request_id, 0) + n_blocks

        if n_blocks == held:
            del self.device_used[request_id]
        else:
            self.device_used[request_id] = held - n_blocks
        self.pending_free += n_blocks
        self.stats['offloads'] += 1

        overhead = fresh * self.host_alloc_ms_per_block
        duration = self.cost_model.transfer_time(n_blocks, TransferDirection.OFFLOAD) + overhead
        return self._ticket(request_id, TransferDirection.OFFLOAD, n_blocks, now, duration,
                            fresh_host_blocks=fresh, overhead_ms=overhead)

    def complete_offload(self, ticket: TransferTicket):
        """Offload finished: pending device blocks join the free pool"""
        if self.pending_free < ticket.n_blocks:
            raise BlockAccountingError(f"pending_free {self.pending_free} < ticket {ticket.n_blocks}")
        self.pending_free -= ticket.n_blocks
        self._give_back(self.owner_type.get(ticket.request_id, ''), ticket.n_blocks)

    def upload_blocks(self, request_id: str, n_blocks: int, now: float = 0.0,
                      reservation: Optional[GradualReservation] = None) -> Optional[TransferTicket]:
        """
        Start moving n host blocks of a request back to the device

        Destination blocks come from the request's staged (gradually reserved)
        blocks first, the remainder is allocated now.

        Returns:
            TransferTicket, or None on an allocation stall (counted in stats)
        """
        host = self.host_in_use.get(request_id, 0)
        if n_blocks < 1 or n_blocks > host:
            raise BlockAccountingError(f"{request_id} uploads {n_blocks} blocks but has {host} on host")
        agent_type = reservation.agent_type if reservation else self.owner_type.get(request_id, '')
        use_staged = min(n_blocks, self.staged.get(request_id, 0))
        remainder = n_blocks - use_staged
        if remainder:
            if self._take(agent_type, remainder) is None:
                self.stats['upload_stalls'] += 1
                logger.debug(f"Upload stall for {request_id}: need {remainder}, "
                             f"available {self.available_for(agent_type)}")
                return None
        if use_staged:
            left = self.staged[request_id] - use_staged
            if left:
                self.staged[request_id] = left
            else:
                del self.staged[request_id]
        self.device_used[request_id] = self.device_used.get(request_id, 0) + n_blocks
        self.owner_type[request_id] = agent_type
        self.stats['uploads'] += 1
        duration = self.cost_model.transfer_time(n_blocks, TransferDirection.UPLOAD)
        return self._ticket(request_id, TransferDirection.UPLOAD, n_blocks, now, duration,
                            from_staged=use_staged)

    def complete_upload(self, ticket: TransferTicket):
        """Upload finished: host blocks go back to the free list (or are released)"""
        host = self.host_in_use.get(ticket.request_id, 0)
        if host < ticket.n_blocks:
            raise BlockAccountingError(f"{ticket.request_id} host {host} < ticket {ticket.n_blocks}")
        if host == ticket.n_blocks:
            del self.host_in_use[ticket.request_id]
        else:
            self.host_in_use[ticket.request_id] = host - ticket.n_blocks
        if self.host_buffer_enabled:
            self.host_free_list += ticket.n_blocks

    # ------------------------------------------------------------------
    # Gradual device reservation
    # ------------------------------------------------------------------

    def begin_gradual_reservation(self, request_id: str, n_blocks: int, start_time: float,
                                  deadline: float, cycles: int = 4,
                                  agent_type: Optional[str] = None) -> GradualReservation:
        """
        Plan claiming n device blocks in `cycles` chunks before `deadline`

        Tick i (1-based) falls at start + i * (deadline - start) / cycles, so
        the last chunk is due exactly at the deadline.
        """
        if not deadline > start_time:
            raise ValueError(f"deadline {deadline} must be after start {start_time}")
        if cycles < 1:
            raise ValueError(f"cycles must be >= 1 (got {cycles})")
        span = (deadline - start_time) / cycles
        res = GradualReservation(
            request_id=request_id,
            agent_type=agent_type or self.owner_type.get(request_id, ''),
            n_blocks=n_blocks,
            start_time=start_time,
            deadline=deadline,
            cycles=cycles,
            chunks=split_chunks(n_blocks, cycles),
            tick_times=[start_time + span * (i + 1) for i in range(cycles)],
        )
        self.owner_type.setdefault(request_id, res.agent_type)
        return res

    def tick_reservation(self, res: GradualReservation, now: float, keep_free: int = 0) -> int:
        """
        Claim every chunk due by `now` (plus earlier shortfall)

        Args:
            res: the reservation
            now: tick time (ms)
            keep_free: blocks the tick must leave available to the type

        Returns:
            blocks claimed on this tick
        """
        if res.cancelled:
            return 0
        want = res.carry
        while res.next_chunk < len(res.chunks) and res.tick_times[res.next_chunk] <= now + 1e-9:
            want += res.chunks[res.next_chunk]
            res.next_chunk += 1
        want = min(want, res.n_blocks - res.claimed)
        if want <= 0:
            res.carry = 0
            return 0
        take = min(want, max(0, self.available_for(res.agent_type) - keep_free))
        if take > 0:
            self._take(res.agent_type, take)
            self.staged[res.request_id] = self.staged.get(res.request_id, 0) + take
            res.claimed += take
        res.carry = want - take
        self.stats['reservation_ticks'] += 1
        return take

    def cancel_reservation(self, res: GradualReservation) -> int:
        """Give back staged blocks of a reservation; returns blocks released"""
        res.cancelled = True
        staged = self.staged.pop(res.request_id, 0)
        if staged:
            self._give_back(res.agent_type, staged)
        return staged

    # ------------------------------------------------------------------
    # Invariants
    # ------------------------------------------------------------------

    def check_invariants(self):
        """Raise BlockAccountingError if any accounting identity is broken"""
        counts = [self.device_free, self.pending_free, self.host_free_list]
        counts += list(self.device_used.values()) + list(self.staged.values()) + list(self.host_in_use.values())
        if any(c < 0 for c in counts):
            raise BlockAccountingError("negative block count")
        lhs = (self.shared_free + sum(self.device_used.values()) + self.reserved_unclaimed
               + sum(self.staged.values()) + self.pending_free)
        if lhs != self.total_device_blocks:
            raise BlockAccountingError(f"device identity broken: {lhs} != {self.total_device_blocks}")
        if sum(self.host_in_use.values()) + self.host_free_list > self.total_host_blocks:
            raise BlockAccountingError("host blocks exceed capacity")
        for entry in self.reserved.values():
            if not 0 <= entry.claimed_blocks <= entry.reserved_blocks:
                raise BlockAccountingError(f"reservation {entry.agent_type} claimed "
                                           f"{entry.claimed_blocks} of {entry.reserved_blocks}")

    def get_stats(self) -> dict:
        stats = self.stats.copy()
        stats['device_free'] = self.device_free
        stats['pending_free'] = self.pending_free
        stats['host_free_list'] = self.host_free_list
        stats['host_in_use'] = sum(self.host_in_use.values())
        return stats
