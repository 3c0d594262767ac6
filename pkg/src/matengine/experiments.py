"""Experiment drivers shared by the CLI and the acceptance tests."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Sequence

from .analytic import (
    SWEEP_ARRAYS,
    ArrayGeometry,
    Control,
    PEVariant,
    PolicyDescriptor,
    Prefetch,
    asymptotic_normalized_runtime,
    utilization_ratio,
)
from .core import CoreConfig, SimReport, normalized_runtime, run_trace
from .engine import ArrayConfig
from .lowering import ConvLayer, FcLayer, Layer, TileDims, lower, with_batch

BASELINE = PolicyDescriptor(Control.BASE, PEVariant.BASELINE)

DESIGNS: dict[str, PolicyDescriptor] = {
    "base": BASELINE,
    "pipe": PolicyDescriptor(Control.PIPE, PEVariant.BASELINE),
    "wlbp": PolicyDescriptor(Control.WLBP, PEVariant.BASELINE),
    "db-wls": PolicyDescriptor(Control.WLS, PEVariant.DB, Prefetch.ROW_CHASING),
    "dm-base": PolicyDescriptor(Control.BASE, PEVariant.DM),
    "dm-pipe": PolicyDescriptor(Control.PIPE, PEVariant.DM),
    "dm-wlbp": PolicyDescriptor(Control.WLBP, PEVariant.DM),
    "dmdb-wls": PolicyDescriptor(Control.WLS, PEVariant.DMDB, Prefetch.ROW_CHASING),
}


def array_for(policy: PolicyDescriptor, tiles: TileDims = TileDims()) -> ArrayConfig:
    geom = ArrayGeometry.for_pe(tiles.t_k, tiles.t_n, tiles.t_m, policy.pe)
    return ArrayConfig(geom, policy)


def reduced_layer(layer: Layer, batch: int = 32, spatial: int = 14) -> Layer:
    """Desk-scale variant: batch ``batch``; conv inputs shrunk to ``spatial`` x ``spatial``."""
    if isinstance(layer, FcLayer):
        return with_batch(layer, batch)
    return ConvLayer(
        layer.name, n=batch, k=layer.k, c=layer.c, x=min(layer.x, spatial), y=min(layer.y, spatial),
        r=layer.r, s=layer.s, stride=layer.stride, pad=layer.pad,
    )


def simulate(layer: Layer, policy: PolicyDescriptor, tiles: TileDims = TileDims(),
             core: CoreConfig = CoreConfig()) -> SimReport:
    _, _, trace = lower(layer, tiles)
    return run_trace(trace, core, array_for(policy, tiles), workload=layer.name)


def _cell(args) -> tuple:
    layer, name, tiles, core = args
    return layer.name, name, simulate(layer, DESIGNS[name], tiles, core)


def _map(fn: Callable, cells: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cells))


def policy_report(
    layers: Iterable[Layer],
    designs: Sequence[str] = tuple(DESIGNS),
    tiles: TileDims = TileDims(),
    core: CoreConfig = CoreConfig(),
    jobs: int = 1,
) -> list[dict]:
    layers = list(layers)
    names = list(designs)
    if "base" not in names:
        names.insert(0, "base")
    cells = [(layer, name, tiles, core) for layer in layers for name in names]
    results = {(ln, dn): rep for ln, dn, rep in _map(_cell, cells, jobs)}
    rows = []
    for layer in layers:
        base = results[layer.name, "base"]
        for name in names:
            rep = results[layer.name, name]
            p = rep.policy
            rows.append(
                {
                    "layer": layer.name,
                    "design": name,
                    "policy": p.control.value,
                    "pe": p.pe.value,
                    "prefetch": p.prefetch.value,
                    "tiles": f"{tiles.t_m}x{tiles.t_k}x{tiles.t_n}",
                    "mm_count": rep.mm_count,
                    "total_cycles": rep.total_cycles,
                    "normalized": float(normalized_runtime(rep, base)),
                    "mean_ii": rep.mean_ii,
                }
            )
    return sorted(rows, key=lambda r: (r["layer"], list(DESIGNS).index(r["design"]) if r["design"] in DESIGNS else 99))


def _batch_cell(args) -> dict:
    layer, batch, policy, tiles, core = args
    scaled = with_batch(layer, batch)
    _, _, trace = lower(scaled, tiles)
    rep = run_trace(trace, core, array_for(policy, tiles), workload=scaled.name)
    base = run_trace(trace, core, array_for(BASELINE, tiles), workload=scaled.name)
    return {
        "layer": layer.name,
        "batch": batch,
        "policy": policy.control.value,
        "pe": policy.pe.value,
        "prefetch": policy.prefetch.value,
        "tiles": f"{tiles.t_m}x{tiles.t_k}x{tiles.t_n}",
        "mm_count": rep.mm_count,
        "total_cycles": rep.total_cycles,
        "baseline_cycles": base.total_cycles,
        "normalized": normalized_runtime(rep, base),
    }


def sweep_batch(
    layer: Layer,
    batches: Iterable[int],
    policy: PolicyDescriptor = DESIGNS["dmdb-wls"],
    tiles: TileDims = TileDims(),
    core: CoreConfig = CoreConfig(),
    jobs: int = 1,
) -> list[dict]:
    """Normalized runtime (vs the BASE design on the same trace) per batch size."""
    cells = [(layer, b, policy, tiles, core) for b in sorted(set(batches))]
    rows = _map(_batch_cell, cells, jobs)
    geom = ArrayGeometry.for_pe(tiles.t_k, tiles.t_n, tiles.t_m, policy.pe)
    asym = asymptotic_normalized_runtime(geom, policy)
    for r in rows:
        r["asymptote"] = asym
    return sorted(rows, key=lambda r: r["batch"])


@dataclass(frozen=True)
class UtilizationPoint:
    rows: int
    cols: int
    t_m: int
    utilization: Fraction


def utilization_points(arrays: Iterable[tuple[int, int]] = SWEEP_ARRAYS, t_m_values: Iterable[int] = range(1, 65)) -> list[UtilizationPoint]:
    t_ms = list(t_m_values)
    return [
        UtilizationPoint(r, c, tm, utilization_ratio(ArrayGeometry(r, c, tm)))
        for r, c in arrays
        for tm in t_ms
    ]
