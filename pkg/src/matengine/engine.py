"""Cycle-level weight-stationary systolic array.

PE ``(r, c)`` holds weight ``B[r, c]``. For an op whose feed starts at cycle
``F``, activation ``A[i, r]`` enters row ``r`` at column 0 on cycle ``F + i + r``
and moves one column east per cycle; the accumulator value ``C[i, c]`` enters
column ``c`` from the north on ``F + i + c`` and moves one row south per cycle.
So PE ``(r, c)`` performs the MAC for row ``i`` on cycle ``F + i + r + c``.
The bottom row's partial sums are written back one cycle later (two with the
double-multiplier merge adders), and the op retires once the whole C tile is
written.

Each MM goes through four sub-stages::

    WL  R cycles   weights shift in from the north, deepest row first
    FF  T_M        feeding the first array row (starts on WL's last cycle)
    FS  R - 1      feeding the remaining rows
    DR  T_N (+1)   partial sums finish moving east/south and drain

``R`` is the number of physical rows (``T_K``, or ``T_K / 2`` with two
multipliers per PE). An op's weights come from one of three sources: a normal
weight load, a prefetch into the shadow buffers (double-buffered PEs only), or
nothing when the resident weights can be reused.

All stage times are fixed when an op is accepted. The per-cycle datapath run
in functional mode then moves every element through PE latches and checks
that no two ops ever touch the same PE resource in one cycle, so a bad
schedule shows up as :class:`EngineConsistencyError` rather than wrong data.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .analytic import (
    ArrayGeometry,
    Control,
    InvalidPolicyError,
    PEVariant,
    PolicyDescriptor,
    Prefetch,
)
from .isa import Instruction, Opcode, TileRegisterFile, to_bf16, unpack_a, unpack_b, unpack_c

# Cycles between the predecessor entering DR and the next WL starting under PIPE.
PIPE_WL_DELAY = 0


class EngineConsistencyError(RuntimeError):
    pass


class Stage(Enum):
    WL = "WL"
    FF = "FF"
    FS = "FS"
    DR = "DR"
    DONE = "Done"


class WeightSource(Enum):
    LOAD = "load"
    PREFETCH = "prefetch"
    BYPASS = "bypass"


class StallReason(Enum):
    ARRAY_BUSY = "array_busy"
    WEIGHT_LINK_BUSY = "weight_link_busy"
    OPERAND_NOT_READY = "operand_not_ready"
    QUEUE_FULL = "queue_full"
    MEMORY_ORDER = "memory_order"
    LOAD_SLOTS = "load_slots"


@dataclass(frozen=True)
class ArrayConfig:
    geometry: ArrayGeometry
    policy: PolicyDescriptor = PolicyDescriptor()

    def __post_init__(self):
        if self.geometry.dm != self.policy.pe.double_multiplier:
            raise InvalidPolicyError(
                f"pe={self.policy.pe.value} needs dm={self.policy.pe.double_multiplier} geometry"
            )

    @classmethod
    def build(
        cls,
        t_k: int = 32,
        t_n: int = 16,
        t_m: int = 16,
        control: Control = Control.BASE,
        pe: PEVariant = PEVariant.BASELINE,
        prefetch: Prefetch = Prefetch.ROW_CHASING,
    ) -> "ArrayConfig":
        return cls(ArrayGeometry.for_pe(t_k, t_n, t_m, pe), PolicyDescriptor(control, pe, prefetch))

    @property
    def multipliers(self) -> int:
        g = self.geometry
        return g.physical_rows * g.t_n * g.lanes


@dataclass
class InFlightOp:
    op_id: int
    dst: int | None
    weight_reg: int | None
    source: WeightSource
    issue: int
    ff_start: int
    end: int
    weight_gen: int
    geometry: ArrayGeometry
    a_phys: np.ndarray | None = field(default=None, repr=False)
    b_phys: np.ndarray | None = field(default=None, repr=False)
    c_in: np.ndarray | None = field(default=None, repr=False)
    out: np.ndarray | None = field(default=None, repr=False)
    written: int = 0

    @property
    def fs_start(self) -> int:
        return self.ff_start + self.geometry.t_m

    @property
    def dr_start(self) -> int:
        return self.fs_start + self.geometry.physical_rows - 1

    @property
    def latency(self) -> int:
        return self.end - self.issue

    def stage(self, cycle: int) -> Stage:
        if cycle >= self.end:
            return Stage.DONE
        if cycle >= self.dr_start:
            return Stage.DR
        if cycle >= self.fs_start:
            return Stage.FS
        if cycle >= self.ff_start:
            return Stage.FF
        return Stage.WL


@dataclass(frozen=True)
class OpRecord:
    op_id: int
    issue: int
    ff_start: int
    retire: int
    source: WeightSource
    weight_reg: int | None


@dataclass
class EngineStats:
    rows: int
    cols: int
    lanes: int
    total_cycles: int = 0
    records: list[OpRecord] = field(default_factory=list)
    busy: np.ndarray = None
    stall_cycles: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.busy is None:
            self.busy = np.zeros((self.rows, self.cols), dtype=np.int64)

    @property
    def mm_count(self) -> int:
        return len(self.records)

    @property
    def mac_count(self) -> int:
        return int(self.busy.sum()) * self.lanes

    @property
    def retire_cycles(self) -> list[int]:
        return [r.retire for r in self.records]

    @property
    def initiation_intervals(self) -> list[int]:
        ends = self.retire_cycles
        return [b - a for a, b in zip(ends, ends[1:])]

    @property
    def mean_ii(self) -> float:
        ends = self.retire_cycles
        if len(ends) < 2:
            return float(ends[0]) if ends else 0.0
        return (ends[-1] - ends[0]) / (len(ends) - 1)

    @property
    def weight_loads_skipped(self) -> int:
        return sum(1 for r in self.records if r.source is WeightSource.BYPASS)

    def add_stall(self, reason: StallReason, cycles: int) -> None:
        if cycles > 0:
            self.stall_cycles[reason.value] = self.stall_cycles.get(reason.value, 0) + cycles


def pe_occupancy(stats: EngineStats, total_cycles: int | None = None) -> np.ndarray:
    """Fraction of cycles each PE spent multiplying."""
    total = stats.total_cycles if total_cycles is None else total_cycles
    if total <= 0:
        return np.zeros_like(stats.busy, dtype=np.float64)
    return stats.busy / float(total)


@dataclass(frozen=True)
class _Plan:
    cycle: int
    source: WeightSource
    ff_delay: int
    reason: StallReason | None


class SystolicEngine:
    """One array instance. Not shareable between threads while running."""

    def __init__(
        self,
        config: ArrayConfig,
        functional: bool = True,
        check: bool = True,
        log_events: bool = False,
    ):
        self.config = config
        self.geometry = g = config.geometry
        self.policy = config.policy
        self.functional = functional
        self.check = check
        self.log_events = log_events
        self.events: list[tuple[int, int, str]] = []
        self.cycle = 0
        self.inflight: list[InFlightOp] = []
        self.last: InFlightOp | None = None
        self.last_prefetch: InFlightOp | None = None
        self.resident_reg: int | None = None
        self.resident_gen = 0
        self._gen = itertools.count(1)
        self._ids = itertools.count()
        R, N, L = g.physical_rows, g.t_n, g.lanes
        self.stats = EngineStats(R, N, L)
        if functional:
            self._rows_idx = np.arange(R)
            self._cols_idx = np.arange(N)
            self._diag = self._rows_idx[:, None] + self._cols_idx[None, :]
            self._weight = np.zeros((L, R, N), np.float32)
            self._weight_gen = np.zeros((R, N), np.int64)
            self._shadow = np.zeros((L, R, N), np.float32)
            self._shadow_gen = np.zeros((R, N), np.int64)
            self._shadow_full = np.zeros((R, N), bool)
            self._act = np.zeros((L, R, N), np.float32)
            self._psum = np.zeros((L, R, N), np.float32)
            self._merge = np.zeros(N, np.float32)

    # -- acceptance -------------------------------------------------------

    def _live(self, cycle: int) -> list[InFlightOp]:
        return [op for op in self.inflight if op.end > cycle]

    def weights_resident(self, weight_reg: int | None, weight_clean: bool) -> bool:
        return (
            self.policy.control in (Control.WLBP, Control.WLS)
            and weight_reg is not None
            and weight_clean
            and self.resident_reg == weight_reg
        )

    def _plan(self, t: int, bypass: bool) -> _Plan:
        """Earliest cycle >= t at which the next MM can start, and how."""
        g = self.geometry
        R = g.physical_rows
        control = self.policy.control
        prev = self.last
        live_end = max((op.end for op in self.inflight), default=0)

        if control is Control.BASE:
            at = max(t, live_end)
            return _Plan(at, WeightSource.LOAD, R - 1, StallReason.ARRAY_BUSY if at > t else None)

        if bypass:
            at = t if prev is None else max(t, prev.ff_start + g.t_m)
            return _Plan(at, WeightSource.BYPASS, 0, StallReason.ARRAY_BUSY if at > t else None)

        if control is Control.WLS and t < live_end:
            plan = self._plan_prefetch(t, prev)
            if plan.cycle < live_end:
                return plan
            # the array drains before a prefetch could start; fall through to a plain WL

        # weight load through the array (PIPE rule; also WLS on an idle array)
        stage_at = t if prev is None else max(t, prev.dr_start + PIPE_WL_DELAY)
        # WL writes row r on cycles [S + r, S + R - 1]; every live op must be done with them
        link_at = max(
            (op.ff_start + g.t_m + g.t_n - 1 for op in self.inflight if op.end > t), default=t
        )
        at = max(stage_at, link_at)
        if at == t:
            reason = None
        elif stage_at >= link_at:
            reason = StallReason.ARRAY_BUSY
        else:
            reason = StallReason.WEIGHT_LINK_BUSY
        if control is Control.WLS:
            at_idle = max(t, live_end)
            if at_idle < at:
                return _Plan(at_idle, WeightSource.LOAD, R - 1, StallReason.ARRAY_BUSY)
        return _Plan(at, WeightSource.LOAD, R - 1, reason)

    def _plan_prefetch(self, t: int, prev: InFlightOp) -> _Plan:
        g = self.geometry
        R = g.physical_rows
        # shadow buffers are free once the previous prefetch starts swapping in
        shadow_at = t if self.last_prefetch is None else max(t, self.last_prefetch.ff_start)
        feed_next = prev.ff_start + g.t_m
        if self.policy.prefetch is Prefetch.ROW_CHASING:
            # shadow row r is written one cycle ahead of the feed wavefront
            at = max(shadow_at, feed_next - 1)
            reason = None if at == t else (
                StallReason.ARRAY_BUSY if feed_next - 1 >= shadow_at else StallReason.WEIGHT_LINK_BUSY
            )
            return _Plan(at, WeightSource.PREFETCH, 1, reason)
        # conservative: one prefetch port, busy R cycles, done before FF
        port_at = t if self.last_prefetch is None else max(t, self.last_prefetch.issue + R)
        at = max(shadow_at, port_at)
        ff = max(at + R, feed_next)
        return _Plan(at, WeightSource.PREFETCH, ff - at, StallReason.WEIGHT_LINK_BUSY if at > t else None)

    def earliest_issue(self, weight_reg: int | None = None, weight_clean: bool = False) -> tuple[int, StallReason | None]:
        plan = self._plan(self.cycle, self.weights_resident(weight_reg, weight_clean))
        return plan.cycle, plan.reason

    def try_issue(self, mm: Instruction, rf: TileRegisterFile):
        """Offer an MM this cycle. Returns the accepted op or a :class:`StallReason`."""
        if mm.kind is not Opcode.MM:
            raise ValueError(f"not an MM instruction: {mm}")
        g = self.geometry
        a = b = c = None
        if self.functional:
            a = unpack_a(rf.read(mm.src_a), g.t_m, g.t_k)
            b = unpack_b(rf.read(mm.src_b), g.t_k, g.t_n)
            c = unpack_c(rf.read(mm.dst), g.t_m, g.t_n)
        return self.offer(a, b, c, dst=mm.dst, weight_reg=mm.src_b, weight_clean=not rf.dirty[mm.src_b])

    def offer(
        self,
        a=None,
        b=None,
        c=None,
        dst: int | None = None,
        weight_reg: int | None = None,
        weight_clean: bool = True,
    ):
        t = self.cycle
        bypass = self.weights_resident(weight_reg, weight_clean)
        plan = self._plan(t, bypass)
        if plan.cycle != t:
            return plan.reason
        g = self.geometry
        R = g.physical_rows
        ff = t + plan.ff_delay
        end = ff + g.t_m + R - 1 + g.t_n + g.merge_cycles
        if plan.source is WeightSource.BYPASS:
            gen = self.resident_gen
        else:
            gen = next(self._gen)
            self.resident_gen = gen
            self.resident_reg = weight_reg
        op = InFlightOp(next(self._ids), dst, weight_reg, plan.source, t, ff, end, gen, g)
        if self.functional:
            self._stage_operands(op, a, b, c)
        self.inflight.append(op)
        self.last = op
        if plan.source is WeightSource.PREFETCH:
            self.last_prefetch = op
        if self.log_events:
            self._log_schedule(op)
        return op

    def _stage_operands(self, op: InFlightOp, a, b, c) -> None:
        g = self.geometry
        L, R = g.lanes, g.physical_rows
        a = to_bf16(a)
        b = to_bf16(b)
        c = np.asarray(c, np.float32)
        if a.shape != (g.t_m, g.t_k) or b.shape != (g.t_k, g.t_n) or c.shape != (g.t_m, g.t_n):
            raise ValueError(f"operand shapes A{a.shape} B{b.shape} C{c.shape} do not match {g}")
        # lane q of physical row r carries logical k = r * L + q
        op.a_phys = a.reshape(g.t_m, R, L).transpose(2, 0, 1).copy()
        op.b_phys = b.reshape(R, L, g.t_n).transpose(1, 0, 2).copy()
        op.c_in = c.copy()
        op.out = np.zeros((g.t_m, g.t_n), np.float32)

    def _log_schedule(self, op: InFlightOp) -> None:
        ev = self.events
        if op.source is WeightSource.BYPASS:
            ev.append((op.issue, op.op_id, "WL skipped"))
        elif op.source is WeightSource.PREFETCH:
            ev.append((op.issue, op.op_id, "WL prefetch"))
        else:
            ev.append((op.issue, op.op_id, "WL"))
        ev.append((op.ff_start, op.op_id, "FF"))
        if op.dr_start > op.fs_start:
            ev.append((op.fs_start, op.op_id, "FS"))
        ev.append((op.dr_start, op.op_id, "DR"))
        ev.append((op.end, op.op_id, "Done"))

    # -- time -------------------------------------------------------------

    @property
    def idle(self) -> bool:
        return not self.inflight

    def next_retire(self) -> int | None:
        return min((op.end for op in self.inflight), default=None)

    def step(self) -> list[InFlightOp]:
        """Simulate the current cycle; returns ops that retire at its end."""
        t = self.cycle
        live = [op for op in self.inflight if op.issue <= t < op.end]
        if self.functional and live:
            with np.errstate(over="ignore", invalid="ignore"):
                self._datapath(t, live)
        self.cycle = t + 1
        return self._retire(self.cycle)

    def advance_to(self, cycle: int) -> list[InFlightOp]:
        """Run every cycle before ``cycle``; returns ops retired on the way."""
        if cycle < self.cycle:
            raise ValueError(f"cannot go back from cycle {self.cycle} to {cycle}")
        if not self.functional:
            self.cycle = cycle
            return self._retire(cycle)
        done = []
        while self.cycle < cycle:
            if not self.inflight:
                self.cycle = cycle
                break
            done.extend(self.step())
        return done

    def drain(self) -> list[InFlightOp]:
        end = max((op.end for op in self.inflight), default=self.cycle)
        return self.advance_to(max(end, self.cycle))

    def _retire(self, now: int) -> list[InFlightOp]:
        done = [op for op in self.inflight if op.end <= now]
        if not done:
            return []
        self.inflight = [op for op in self.inflight if op.end > now]
        g = self.geometry
        for op in done:
            if self.functional:
                if self.check and op.written != g.t_m * g.t_n:
                    raise EngineConsistencyError(
                        f"op {op.op_id} retired with {op.written} of {g.t_m * g.t_n} outputs written"
                    )
            else:
                self.stats.busy += g.t_m
            self.stats.records.append(
                OpRecord(op.op_id, op.issue, op.ff_start, op.end, op.source, op.weight_reg)
            )
            self.stats.total_cycles = max(self.stats.total_cycles, op.end)
        return done

    # -- per-cycle datapath --------------------------------------------------

    def _claim(self, owner: np.ndarray, mask: np.ndarray, op: InFlightOp, what: str, t: int) -> None:
        clash = mask & (owner >= 0) & (owner != op.op_id)
        if clash.any():
            r, c = np.argwhere(clash)[0]
            raise EngineConsistencyError(
                f"cycle {t}: op {op.op_id} and op {owner[r, c]} both use the {what} of PE ({r}, {c})"
            )
        owner[mask] = op.op_id

    def _datapath(self, t: int, live: Sequence[InFlightOp]) -> None:
        g = self.geometry
        R, N, M = g.physical_rows, g.t_n, g.t_m
        rows, cols, diag = self._rows_idx, self._cols_idx, self._diag
        check = self.check
        if check:
            weight_owner = np.full((R, N), -1, np.int64)
            mult_owner = np.full((R, N), -1, np.int64)
            port_owner = np.full(N, -1, np.int64)

        # 1. write back bottom-row results produced last cycle
        psum = self._psum
        lag = 2 if g.dm else 1
        for op in live:
            i = t - lag - op.ff_start - (R - 1) - cols
            valid = (i >= 0) & (i < M)
            if not valid.any():
                continue
            if check:
                self._claim(port_owner[None, :], valid[None, :], op, "output port", t)
            src = self._merge if g.dm else psum[0, R - 1]
            op.out[i[valid], cols[valid]] = src[valid]
            op.written += int(valid.sum())
        if g.dm:
            for op in live:
                i = t - 1 - op.ff_start - (R - 1) - cols
                valid = (i >= 0) & (i < M)
                if valid.any():
                    self._merge[valid] = psum[0, R - 1, valid] + psum[1, R - 1, valid]

        # 2. weight movement: loads, shadow-to-active swaps, then shadow fills
        for op in live:
            if op.source is WeightSource.LOAD and t <= op.ff_start:
                j = t - op.issue
                touched = np.zeros((R, N), bool)
                touched[: j + 1] = True
                if check:
                    self._claim(weight_owner, touched, op, "weight register", t)
                if j > 0:
                    self._weight[:, 1 : j + 1] = self._weight[:, :j]
                self._weight[:, 0] = op.b_phys[:, R - 1 - j]
                self._weight_gen[: j + 1] = op.weight_gen
            elif op.source is WeightSource.PREFETCH:
                swap = diag == t - op.ff_start
                if swap.any():
                    if check:
                        self._claim(weight_owner, swap, op, "weight register", t)
                        ok = self._shadow_full[swap] & (self._shadow_gen[swap] == op.weight_gen)
                        if not ok.all():
                            raise EngineConsistencyError(f"cycle {t}: op {op.op_id} swaps in weights it never prefetched")
                    self._weight[:, swap] = self._shadow[:, swap]
                    self._weight_gen[swap] = self._shadow_gen[swap]
                    self._shadow_full[swap] = False
        for op in live:
            if op.source is WeightSource.PREFETCH:
                fill = diag == t - op.issue
                if fill.any():
                    if check and self._shadow_full[fill].any():
                        raise EngineConsistencyError(
                            f"cycle {t}: op {op.op_id} overwrites shadow weights not yet swapped in"
                        )
                    self._shadow[:, fill] = op.b_phys[:, fill]
                    self._shadow_gen[fill] = op.weight_gen
                    self._shadow_full[fill] = True

        # 3. MACs: activations move east, partial sums south
        act_in = np.zeros_like(self._act)
        act_in[:, :, 1:] = self._act[:, :, :-1]
        psum_in = np.zeros_like(psum)
        psum_in[:, 1:, :] = psum[:, :-1, :]
        active = np.zeros((R, N), bool)
        for op in live:
            if t < op.ff_start or t >= op.dr_start + N:
                continue
            i = t - op.ff_start - diag
            mask = (i >= 0) & (i < M)
            if not mask.any():
                continue
            if check:
                self._claim(mult_owner, mask, op, "multiplier", t)
                self._claim(weight_owner, mask, op, "weight register", t)
                if (self._weight_gen[mask] != op.weight_gen).any():
                    raise EngineConsistencyError(f"cycle {t}: op {op.op_id} multiplies with another op's weights")
            active |= mask
            ir = t - op.ff_start - rows
            fed = (ir >= 0) & (ir < M)
            act_in[:, fed, 0] = op.a_phys[:, ir[fed], rows[fed]]
            ic = t - op.ff_start - cols
            inj = (ic >= 0) & (ic < M)
            psum_in[0, 0, inj] = op.c_in[ic[inj], cols[inj]]
            if g.dm:
                psum_in[1, 0, inj] = 0.0
        if active.any():
            new = psum_in + act_in * self._weight
            self._psum = np.where(active, new, psum).astype(np.float32, copy=False)
            self._act = np.where(active, act_in, self._act).astype(np.float32, copy=False)
            self.stats.busy += active
        if self.log_events and active.any():
            self.events.append((t, -1, f"busy {int(active.sum())}/{active.size}"))

    def event_log(self) -> str:
        lines = []
        for cycle, op_id, text in sorted(self.events):
            who = "-" if op_id < 0 else f"op{op_id}"
            lines.append(f"{cycle} {who} {text}")
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class StreamMM:
    """One MM of a back-to-back stream: operand tiles plus the weight register id."""

    a: np.ndarray | None = None
    b: np.ndarray | None = None
    c: np.ndarray | None = None
    weight_reg: int | None = None
    weight_clean: bool = True


def run_mm_stream(
    config: ArrayConfig,
    mms: Iterable[StreamMM],
    functional: bool = True,
    check: bool = True,
    log_events: bool = False,
) -> tuple[list[np.ndarray | None], EngineStats]:
    """Issue ``mms`` back to back as early as the policy allows."""
    engine = SystolicEngine(config, functional=functional, check=check, log_events=log_events)
    ops = []
    for mm in mms:
        while True:
            result = engine.offer(mm.a, mm.b, mm.c, weight_reg=mm.weight_reg, weight_clean=mm.weight_clean)
            if isinstance(result, InFlightOp):
                ops.append(result)
                break
            at, reason = engine.earliest_issue(mm.weight_reg, mm.weight_clean)
            engine.stats.add_stall(reason, at - engine.cycle)
            engine.advance_to(at)
    engine.drain()
    engine.stats.total_cycles = max(engine.stats.total_cycles, engine.cycle)
    outputs = [op.out if functional else None for op in ops]
    return outputs, engine.stats


def run_single(config: ArrayConfig, a, b, c) -> tuple[np.ndarray, EngineStats]:
    outs, stats = run_mm_stream(config, [StreamMM(a, b, c)])
    return outs[0], stats
