"""Trace-driven core model that feeds tile instructions to the engine.

Instructions dispatch in program order, up to ``dispatch_width`` per cycle:

* ``TL`` reads memory when it dispatches and writes its register
  ``tl_latency`` cycles later (marking it dirty). It waits for an earlier
  writer of the same register, for a free load slot, and for any in-flight
  store to overlapping bytes.
* ``TS`` reads its register when it dispatches (so it waits for the last
  writer) and writes memory ``ts_latency`` cycles later. It never touches
  dirty bits.
* ``MM`` needs its A, B and accumulator registers ready. Its operands are
  captured at dispatch, the weight register's dirty bit is consumed, and the
  op waits in a short queue until the engine accepts it. The accumulator is
  written back (and marked dirty) when the op retires.

Because every read happens at dispatch, a later writer can never clobber a
value an earlier reader still needs, so WAR hazards need no tracking.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

from .analytic import PolicyDescriptor
from .engine import ArrayConfig, EngineStats, InFlightOp, StallReason, SystolicEngine
from .isa import (
    ROW_BYTES,
    TILE_ROWS,
    Instruction,
    Opcode,
    TileRegisterFile,
    Trace,
    apply_write,
    format_trace,
    pack_c,
    unpack_a,
    unpack_b,
    unpack_c,
    validate_trace,
)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CoreConfig:
    dispatch_width: int = 4
    tl_latency: int = 16
    ts_latency: int = 16
    max_outstanding_loads: int = 16
    mm_queue_depth: int = 4
    pipeline_constant: int = 0
    max_cycles: int | None = None

    def __post_init__(self):
        for name in ("dispatch_width", "tl_latency", "ts_latency", "max_outstanding_loads", "mm_queue_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.pipeline_constant < 0:
            raise ValueError("pipeline_constant must be non-negative")


class Scoreboard:
    """Per-register readiness: ready cycle, or ``None`` while the writer's finish time is unknown."""

    def __init__(self, num_regs: int = 8):
        self.ready_at: list[int | None] = [0] * num_regs
        self.writer: list[int | None] = [None] * num_regs

    def is_ready(self, reg: int, cycle: int) -> bool:
        at = self.ready_at[reg]
        return at is not None and at <= cycle

    def claim(self, reg: int, writer: int, ready_at: int | None) -> None:
        self.ready_at[reg] = ready_at
        self.writer[reg] = writer

    def release(self, reg: int, writer: int, cycle: int) -> None:
        if self.writer[reg] == writer:
            self.ready_at[reg] = cycle
            self.writer[reg] = None

    def known_ready_times(self, cycle: int) -> list[int]:
        return [t for t in self.ready_at if t is not None and t > cycle]


@dataclass(frozen=True)
class InstrTiming:
    index: int
    kind: Opcode
    dispatch: int
    complete: int


@dataclass(frozen=True)
class SimReport:
    workload: str
    policy: PolicyDescriptor
    total_cycles: int
    counts: dict
    latencies: dict
    engine: EngineStats = field(repr=False, compare=False)
    trace_hash: str
    stalls: dict = field(default_factory=dict)
    memory: np.ndarray | None = field(default=None, repr=False, compare=False)
    registers: TileRegisterFile | None = field(default=None, repr=False, compare=False)
    timeline: tuple[InstrTiming, ...] = field(default=(), repr=False, compare=False)
    events: str = field(default="", repr=False, compare=False)

    @property
    def mm_count(self) -> int:
        return self.counts.get("MM", 0)

    @property
    def mean_ii(self) -> float:
        return self.engine.mean_ii

    @property
    def mean_utilization(self) -> Fraction:
        return mean_utilization(self.engine)

    def to_json(self, baseline: "SimReport | None" = None) -> dict:
        p = self.policy
        return {
            "workload": self.workload,
            "policy": p.control.value,
            "pe": p.pe.value,
            "prefetch": p.prefetch.value,
            "total_cycles": self.total_cycles,
            "mm_count": self.mm_count,
            "mean_ii": round(self.mean_ii, 6),
            "mean_utilization": round(float(self.mean_utilization), 6),
            "normalized": None if baseline is None else round(float(normalized_runtime(self, baseline)), 6),
        }

    def dumps(self, baseline: "SimReport | None" = None) -> str:
        return json.dumps(self.to_json(baseline), sort_keys=True)


def mean_utilization(stats: EngineStats) -> Fraction:
    """Busy PE-cycles over PE-cycles in the window from first accept to last retire."""
    if not stats.records:
        return Fraction(0)
    span = max(r.retire for r in stats.records) - min(r.issue for r in stats.records)
    return Fraction(int(stats.busy.sum()), stats.busy.size * span)


def trace_hash(trace: Trace) -> str:
    return hashlib.sha256(format_trace(trace).encode()).hexdigest()


def normalized_runtime(report: SimReport, baseline: SimReport) -> Fraction:
    if report.trace_hash != baseline.trace_hash:
        raise ValueError(
            f"reports come from different traces ({report.workload!r} vs {baseline.workload!r})"
        )
    if baseline.total_cycles == 0:
        return Fraction(1)
    return Fraction(report.total_cycles, baseline.total_cycles)


def _rows(base: int, stride: int) -> np.ndarray:
    return base + stride * np.arange(TILE_ROWS)


def _overlap(a: Instruction, b: Instruction) -> bool:
    ra, rb = _rows(a.base, a.stride), _rows(b.base, b.stride)
    return bool((np.abs(ra[:, None] - rb[None, :]) < ROW_BYTES).any())


def _tile_bytes(memory: np.ndarray, ins: Instruction) -> np.ndarray:
    idx = _rows(ins.base, ins.stride)[:, None] + np.arange(ROW_BYTES)[None, :]
    return memory[idx]


@dataclass
class _Queued:
    index: int
    ins: Instruction
    dispatch: int
    a: np.ndarray | None
    b: np.ndarray | None
    c: np.ndarray | None
    clean: bool


def run_trace(
    trace: Trace,
    core: CoreConfig = CoreConfig(),
    array: ArrayConfig | None = None,
    memory: np.ndarray | None = None,
    functional: bool | None = None,
    workload: str = "trace",
    record_timeline: bool = False,
    log_events: bool = False,
) -> SimReport:
    """Run ``trace`` to completion.

    ``functional`` defaults to whether a memory image was given. Timing-only
    runs skip idle cycles and scale to traces with hundreds of thousands of MMs.
    """
    if array is None:
        array = ArrayConfig.build(trace.t_k, trace.t_n, trace.t_m)
    g = array.geometry
    if (g.t_m, g.t_k, g.t_n) != (trace.t_m, trace.t_k, trace.t_n):
        raise SimulationError(
            f"trace tiles ({trace.t_m},{trace.t_k},{trace.t_n}) do not match array ({g.t_m},{g.t_k},{g.t_n})"
        )
    problems = validate_trace(trace)
    if problems:
        raise SimulationError("invalid trace: " + "; ".join(problems[:5]))
    if functional is None:
        functional = memory is not None
    if functional:
        if memory is None:
            raise SimulationError("functional simulation needs a memory image")
        memory = np.array(memory, dtype=np.uint8, copy=True)
    if memory is not None:
        for i, ins in enumerate(trace.body):
            if ins.kind is not Opcode.MM:
                last = ins.base + (TILE_ROWS - 1) * ins.stride + ROW_BYTES
                if last > memory.size:
                    where = f"line {ins.line}" if ins.line else f"instruction {i}"
                    raise SimulationError(
                        f"{where}: {ins} touches bytes up to 0x{last:x}, memory image is 0x{memory.size:x}"
                    )

    engine = SystolicEngine(array, functional=functional, log_events=log_events)
    body = trace.body
    rf = TileRegisterFile.zeros() if functional else TileRegisterFile()
    sb = Scoreboard()
    queue: deque[_Queued] = deque()
    pending_loads: list[tuple[int, int, int, np.ndarray | None]] = []  # done, index, reg, payload
    pending_stores: list[tuple[int, int, Instruction, np.ndarray | None]] = []
    op_index: dict[int, _Queued] = {}
    counts = {k.value: 0 for k in Opcode}
    latencies = {k.value: 0 for k in Opcode}
    timeline: list[InstrTiming] = []
    stalls: dict[str, int] = {}
    last_done = 0
    pc = 0
    t = 0

    def finish(index: int, kind: Opcode, dispatched: int, done: int) -> None:
        nonlocal last_done
        counts[kind.value] += 1
        latencies[kind.value] += done - dispatched
        last_done = max(last_done, done)
        if record_timeline:
            timeline.append(InstrTiming(index, kind, dispatched, done))

    def stall(reason: StallReason, cycles: int) -> None:
        if cycles > 0:
            stalls[reason.value] = stalls.get(reason.value, 0) + cycles

    def blocked(reason: str) -> SimulationError:
        ins = body[pc] if pc < len(body) else None
        where = f"instruction {pc} ({ins})" if ins is not None else "engine queue"
        return SimulationError(f"cycle {t}: no progress possible; {where} blocked: {reason}")

    while True:
        # retirements and memory completions that land on this cycle
        for op in engine.advance_to(t):
            q = op_index.pop(op.op_id)
            payload = pack_c(op.out, rf.read(q.ins.dst)) if functional else None
            rf = apply_write(rf, q.ins.dst, payload)
            sb.release(q.ins.dst, q.index, op.end)
            finish(q.index, Opcode.MM, q.dispatch, op.end)
        if pending_loads and min(p[0] for p in pending_loads) <= t:
            keep = []
            for done, index, reg, payload in pending_loads:
                if done <= t:
                    rf = apply_write(rf, reg, payload)
                    sb.release(reg, index, done)
                else:
                    keep.append((done, index, reg, payload))
            pending_loads = keep
        if pending_stores and min(p[0] for p in pending_stores) <= t:
            keep = []
            for done, index, ins, payload in pending_stores:
                if done <= t:
                    if functional:
                        idx = _rows(ins.base, ins.stride)[:, None] + np.arange(ROW_BYTES)[None, :]
                        memory[idx] = payload
                else:
                    keep.append((done, index, ins, payload))
            pending_stores = keep

        # in-order dispatch
        dispatched = 0
        why: StallReason | None = None
        while pc < len(body) and dispatched < core.dispatch_width:
            ins = body[pc]
            if ins.kind is Opcode.TL:
                if not sb.is_ready(ins.reg, t):
                    why = StallReason.OPERAND_NOT_READY
                    break
                if len(pending_loads) >= core.max_outstanding_loads:
                    why = StallReason.LOAD_SLOTS
                    break
                if any(_overlap(ins, s[2]) for s in pending_stores):
                    why = StallReason.MEMORY_ORDER
                    break
                payload = _tile_bytes(memory, ins) if functional else None
                done = t + core.tl_latency
                pending_loads.append((done, pc, ins.reg, payload))
                sb.claim(ins.reg, pc, done)
                finish(pc, ins.kind, t, done)
            elif ins.kind is Opcode.TS:
                if not sb.is_ready(ins.reg, t):
                    why = StallReason.OPERAND_NOT_READY
                    break
                payload = np.array(rf.read(ins.reg)) if functional else None
                done = t + core.ts_latency
                pending_stores.append((done, pc, ins, payload))
                finish(pc, ins.kind, t, done)
            else:
                if not all(sb.is_ready(r, t) for r in ins.regs):
                    why = StallReason.OPERAND_NOT_READY
                    break
                if len(queue) >= core.mm_queue_depth:
                    why = StallReason.QUEUE_FULL
                    break
                a = b = c = None
                if functional:
                    a = unpack_a(rf.read(ins.src_a), g.t_m, g.t_k)
                    b = unpack_b(rf.read(ins.src_b), g.t_k, g.t_n)
                    c = unpack_c(rf.read(ins.dst), g.t_m, g.t_n)
                clean = not rf.dirty[ins.src_b]
                rf = rf.consume_weight(ins.src_b)
                queue.append(_Queued(pc, ins, t, a, b, c, clean))
                sb.claim(ins.dst, pc, None)
            pc += 1
            dispatched += 1

        # engine accepts from the queue head
        issued = 0
        head_wait: tuple[int, StallReason | None] | None = None
        while queue:
            q = queue[0]
            res = engine.offer(q.a, q.b, q.c, dst=q.ins.dst, weight_reg=q.ins.src_b, weight_clean=q.clean)
            if not isinstance(res, InFlightOp):
                head_wait = engine.earliest_issue(q.ins.src_b, q.clean)
                break
            queue.popleft()
            q.a = q.b = q.c = None
            op_index[res.op_id] = q
            sb.claim(q.ins.dst, q.index, res.end)
            issued += 1

        if pc >= len(body) and not queue and engine.idle and not pending_loads and not pending_stores:
            break

        if dispatched == core.dispatch_width:
            nxt = t + 1
        else:
            candidates = [p[0] for p in pending_loads] + [p[0] for p in pending_stores]
            nr = engine.next_retire()
            if nr is not None:
                candidates.append(nr)
            if head_wait is not None:
                candidates.append(head_wait[0])
            if issued:
                candidates.append(t + 1)
            candidates = [c for c in candidates if c > t]
            if not candidates:
                raise blocked(why.value if why else "nothing in flight")
            nxt = min(candidates)
            if why is not None:
                stall(why, nxt - t)
            if head_wait is not None and head_wait[1] is not None:
                engine.stats.add_stall(head_wait[1], min(nxt, head_wait[0]) - t)
        if core.max_cycles is not None and nxt > core.max_cycles:
            raise blocked(f"cycle limit {core.max_cycles} exceeded")
        t = nxt

    engine.stats.total_cycles = max(engine.stats.total_cycles, last_done)
    total = last_done + core.pipeline_constant
    timeline.sort(key=lambda x: x.index)
    return SimReport(
        workload=workload,
        policy=array.policy,
        total_cycles=total,
        counts=counts,
        latencies=latencies,
        engine=engine.stats,
        trace_hash=trace_hash(trace),
        stalls=stalls,
        memory=memory,
        registers=rf if functional else None,
        timeline=tuple(timeline),
        events=engine.event_log() if log_events else "",
    )


def run_configs(
    trace: Trace,
    arrays: Iterable[ArrayConfig],
    core: CoreConfig = CoreConfig(),
    memory: np.ndarray | None = None,
    workload: str = "trace",
) -> list[SimReport]:
    return [run_trace(trace, core, a, memory=memory, workload=workload) for a in arrays]
