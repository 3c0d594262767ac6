"""Closed-form timing model for a weight-stationary systolic matrix engine.

All quantities are in cycles. A geometry describes one tile triple mapped onto
the array: ``t_k`` weight rows (the reduction depth), ``t_n`` columns and
``t_m`` streamed activation rows. With double-multiplier PEs two logical weight
rows share one physical row, so the array is ``t_k / 2`` rows deep and a row of
merge adders at the bottom adds one drain cycle.

Rational results (utilization, normalized runtime) are returned as
:class:`fractions.Fraction` so identities can be checked exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from typing import Iterable

MERGE_ADDER_CYCLES = 1


class Control(Enum):
    BASE = "base"
    PIPE = "pipe"
    WLBP = "wlbp"
    WLS = "wls"


class PEVariant(Enum):
    BASELINE = "baseline"
    DB = "db"
    DM = "dm"
    DMDB = "dmdb"

    @property
    def double_buffered(self) -> bool:
        return self in (PEVariant.DB, PEVariant.DMDB)

    @property
    def double_multiplier(self) -> bool:
        return self in (PEVariant.DM, PEVariant.DMDB)


class Prefetch(Enum):
    CONSERVATIVE = "conservative"
    ROW_CHASING = "row-chasing"


class InvalidPolicyError(ValueError):
    pass


@dataclass(frozen=True)
class ArrayGeometry:
    t_k: int
    t_n: int
    t_m: int
    dm: bool = False

    def __post_init__(self):
        for name in ("t_k", "t_n", "t_m"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dm and self.t_k % 2:
            raise ValueError(f"double-multiplier PEs need an even t_k, got {self.t_k}")

    @property
    def physical_rows(self) -> int:
        return self.t_k // 2 if self.dm else self.t_k

    @property
    def merge_cycles(self) -> int:
        return MERGE_ADDER_CYCLES if self.dm else 0

    @property
    def lanes(self) -> int:
        """Multipliers per PE."""
        return 2 if self.dm else 1

    def baseline(self) -> "ArrayGeometry":
        return replace(self, dm=False)

    @classmethod
    def for_pe(cls, t_k: int, t_n: int, t_m: int, pe: PEVariant) -> "ArrayGeometry":
        return cls(t_k, t_n, t_m, dm=pe.double_multiplier)


@dataclass(frozen=True)
class PolicyDescriptor:
    control: Control = Control.BASE
    pe: PEVariant = PEVariant.BASELINE
    prefetch: Prefetch = Prefetch.ROW_CHASING

    def __post_init__(self):
        if self.control is Control.WLS and not self.pe.double_buffered:
            raise InvalidPolicyError(
                f"WLS needs shadow weight buffers and links (pe db or dmdb), got pe={self.pe.value}"
            )

    @property
    def name(self) -> str:
        if self.control is Control.BASE and self.pe is PEVariant.BASELINE:
            return "base"
        prefix = "" if self.pe is PEVariant.BASELINE else f"{self.pe.value}-"
        return f"{prefix}{self.control.value}"


def _check(geom: ArrayGeometry, policy: PolicyDescriptor) -> None:
    if geom.dm != policy.pe.double_multiplier:
        raise InvalidPolicyError(
            f"geometry dm={geom.dm} does not match pe={policy.pe.value}"
        )


def stage_durations(geom: ArrayGeometry) -> dict[str, int]:
    """Length of each execution sub-stage. WL's last cycle overlaps FF's first."""
    rows = geom.physical_rows
    return {
        "WL": rows,
        "FF": geom.t_m,
        "FS": rows - 1,
        "DR": geom.t_n + geom.merge_cycles,
    }


def latency_base(geom: ArrayGeometry) -> int:
    rows = geom.physical_rows
    return 2 * rows + geom.t_n + geom.t_m - 2 + geom.merge_cycles


def inactive_cycles(geom: ArrayGeometry) -> int:
    return latency_base(geom) - geom.t_m


def utilization_ratio(geom: ArrayGeometry) -> Fraction:
    return Fraction(geom.t_m, latency_base(geom))


def pipe_ii(geom: ArrayGeometry) -> int:
    # The next WL may start once the predecessor drains (stage rule) and once
    # every column has finished with the weights it would overwrite (link rule).
    rows = geom.physical_rows
    return 2 * rows + geom.t_m - 2 + max(0, geom.t_n - rows)


def steady_state_ii(
    geom: ArrayGeometry, policy: PolicyDescriptor, weight_reused: bool = False
) -> int:
    """Cycles between retirements in an endless back-to-back MM stream."""
    _check(geom, policy)
    control = policy.control
    if control is Control.BASE:
        return latency_base(geom)
    if control is Control.PIPE:
        return pipe_ii(geom)
    if weight_reused:
        return geom.t_m
    if control is Control.WLBP:
        return pipe_ii(geom)
    if policy.prefetch is Prefetch.ROW_CHASING:
        return geom.t_m
    return max(geom.t_m, geom.physical_rows)


@dataclass(frozen=True)
class TraceStats:
    mm_count: int
    reused_count: int = 0
    overhead_cycles: int = 0

    def __post_init__(self):
        if self.mm_count < 0 or self.overhead_cycles < 0:
            raise ValueError("counts must be non-negative")
        if not 0 <= self.reused_count <= max(0, self.mm_count - 1):
            raise ValueError("reused_count must lie in [0, mm_count - 1]")


def mm_stream_cycles(stats: TraceStats, geom: ArrayGeometry, policy: PolicyDescriptor) -> int:
    """First MM pays full latency; every later one adds its steady-state II."""
    if stats.mm_count == 0:
        return 0
    fresh = stats.mm_count - 1 - stats.reused_count
    return (
        latency_base(geom)
        + fresh * steady_state_ii(geom, policy, weight_reused=False)
        + stats.reused_count * steady_state_ii(geom, policy, weight_reused=True)
    )


def normalized_runtime_bound(
    stats: TraceStats, geom: ArrayGeometry, policy: PolicyDescriptor
) -> Fraction:
    """Runtime of ``policy`` over the serialized baseline-PE array, same overhead."""
    base_geom = geom.baseline()
    base = latency_base(base_geom) * stats.mm_count + stats.overhead_cycles
    if base == 0:
        return Fraction(1)
    return Fraction(mm_stream_cycles(stats, geom, policy) + stats.overhead_cycles, base)


def asymptotic_normalized_runtime(geom: ArrayGeometry, policy: PolicyDescriptor) -> Fraction:
    return Fraction(steady_state_ii(geom, policy), latency_base(geom.baseline()))


SWEEP_ARRAYS = ((4, 4), (8, 8), (16, 16), (32, 32))


def utilization_curve(t_k: int, t_n: int, t_m_values: Iterable[int]) -> list[tuple[int, Fraction]]:
    return [(t_m, utilization_ratio(ArrayGeometry(t_k, t_n, t_m))) for t_m in t_m_values]


def model_rows(t_k: int, t_n: int, t_m: int) -> list[dict]:
    """One row per valid (control, pe) pair; feeds the ``model`` CSV."""
    rows = []
    for pe in PEVariant:
        geom = ArrayGeometry.for_pe(t_k, t_n, t_m, pe)
        for control in Control:
            prefetches = list(Prefetch) if control is Control.WLS else [Prefetch.ROW_CHASING]
            for prefetch in prefetches:
                try:
                    policy = PolicyDescriptor(control, pe, prefetch)
                except InvalidPolicyError:
                    continue
                rows.append(
                    {
                        "t_k": t_k,
                        "t_n": t_n,
                        "t_m": t_m,
                        "policy": control.value,
                        "pe": pe.value,
                        "prefetch": prefetch.value,
                        "latency": latency_base(geom),
                        "ii": steady_state_ii(geom, policy),
                        "utilization": float(utilization_ratio(geom)),
                    }
                )
    return rows
