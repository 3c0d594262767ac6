"""``matengine`` command line.

Exit codes: 0 success, 1 simulation error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import analytic
from .analytic import SWEEP_ARRAYS, ArrayGeometry, Control, InvalidPolicyError, PEVariant, PolicyDescriptor, Prefetch
from .core import CoreConfig, SimulationError, run_trace
from .engine import ArrayConfig, EngineConsistencyError
from .experiments import BASELINE, DESIGNS, utilization_points, policy_report, reduced_layer, sweep_batch
from .isa import BF16, Opcode, Trace, TraceSyntaxError, format_trace, parse_trace
from .lowering import (
    BUILTIN_LAYERS,
    GemmDims,
    LayerSyntaxError,
    TileDims,
    emit_trace,
    lower,
    parse_layers,
    plan_tiles,
    safe_name,
    with_batch,
)
from .svg import bar_chart, line_chart


class UsageError(Exception):
    pass


def _pair(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected RxC, got {text!r}") from None
    if r < 1 or c < 1:
        raise argparse.ArgumentTypeError(f"array dims must be positive: {text!r}")
    return r, c


def _tiles(text: str) -> TileDims:
    try:
        return TileDims.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive")
    return values


def _write_csv(rows: list[dict], path: Path | None, append: bool = False) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    exists = path is not None and append and path.exists() and path.stat().st_size > 0
    if not exists:
        writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(v) for k, v in row.items()})
    text = buf.getvalue()
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a" if append else "w", newline="") as fh:
            fh.write(text)
    return text


def _cell(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    if hasattr(v, "numerator") and hasattr(v, "denominator") and not isinstance(v, int):
        return f"{float(v):.6f}"
    return v


def _policy(args) -> PolicyDescriptor:
    try:
        return PolicyDescriptor(Control(args.policy), PEVariant(args.pe), Prefetch(args.prefetch))
    except InvalidPolicyError as exc:
        raise UsageError(f"{exc} (WLS requires extra buffers and links)") from None


def _check_array(args, tiles: TileDims) -> None:
    if args.array is not None and args.array != (tiles.t_k, tiles.t_n):
        raise UsageError(
            f"--array {args.array[0]}x{args.array[1]} does not match tiles "
            f"t_k={tiles.t_k} t_n={tiles.t_n}"
        )


def _core(args) -> CoreConfig:
    return CoreConfig(tl_latency=args.tl_latency, ts_latency=args.ts_latency)


def _out(args) -> Path | None:
    if args.out is None:
        return None
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_layers(args):
    layers = []
    if args.file:
        layers.extend(parse_layers(Path(args.file).read_text()))
    for name in args.layer or []:
        if name not in BUILTIN_LAYERS:
            raise UsageError(f"unknown layer {name!r}; known: {', '.join(BUILTIN_LAYERS)}")
        layers.append(BUILTIN_LAYERS[name])
    if not layers and not getattr(args, "gemm", None):
        layers = list(BUILTIN_LAYERS.values())
    if getattr(args, "batch", None):
        layers = [with_batch(l, args.batch) for l in layers]
    return layers


# -- subcommands -----------------------------------------------------------------


def cmd_lower(args) -> int:
    tiles = args.tiles
    _check_array(args, tiles)
    out = _out(args)
    jobs = []
    for layer in _load_layers(args):
        _, _, trace = lower(layer, tiles)
        jobs.append((layer.name, trace))
    if args.gemm:
        m, k, n = args.gemm
        trace = emit_trace(plan_tiles(GemmDims(m=m, n=n, k=k), tiles))
        jobs.append((f"gemm_{m}x{k}x{n}", trace))
    for name, trace in jobs:
        if out is not None:
            (out / f"{safe_name(name)}.trace").write_text(format_trace(trace))
        print(
            f"{name} MM={trace.count(Opcode.MM)} TL={trace.count(Opcode.TL)} TS={trace.count(Opcode.TS)}"
        )
    return 0


def _random_image(trace: Trace, seed: int) -> np.ndarray:
    end = 0
    for ins in trace.body:
        if ins.kind is not Opcode.MM:
            end = max(end, ins.base + 15 * ins.stride + 64)
    end += -end % 2
    rng = np.random.default_rng(seed)
    words = rng.uniform(-1, 1, size=end // 2).astype(np.float32).astype(BF16).view(np.uint16)
    return words.view(np.uint8).copy()


def cmd_sim(args) -> int:
    trace = parse_trace(Path(args.trace).read_text())
    tiles = TileDims(trace.t_m, trace.t_k, trace.t_n)
    _check_array(args, tiles)
    policy = _policy(args)
    geom = ArrayGeometry.for_pe(tiles.t_k, tiles.t_n, tiles.t_m, policy.pe)
    core = _core(args)
    name = Path(args.trace).stem
    image = _random_image(trace, args.seed) if args.functional else None
    report = run_trace(
        trace, core, ArrayConfig(geom, policy), memory=image, workload=name, log_events=args.trace_cycles
    )
    baseline = run_trace(trace, core, ArrayConfig(ArrayGeometry(tiles.t_k, tiles.t_n, tiles.t_m), BASELINE), workload=name)
    doc = report.to_json(baseline)
    if args.functional:
        import hashlib

        doc["memory_sha256"] = hashlib.sha256(report.memory.tobytes()).hexdigest()
    print(json.dumps(doc, sort_keys=True))
    row = {
        **{k: doc[k] for k in ("workload", "policy", "pe", "prefetch")},
        "tiles": f"{tiles.t_m}x{tiles.t_k}x{tiles.t_n}",
        "tl_latency": core.tl_latency,
        "ts_latency": core.ts_latency,
        "functional": int(args.functional),
        "seed": args.seed,
        **{k: doc[k] for k in ("total_cycles", "mm_count", "mean_ii", "mean_utilization", "normalized")},
    }
    out = _out(args)
    if out is not None:
        _write_csv([row], out / "results.csv", append=True)
        (out / f"{safe_name(name)}.{policy.name}.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    if args.trace_cycles:
        if out is not None:
            (out / f"{safe_name(name)}.{policy.name}.cycles.txt").write_text(report.events)
        else:
            sys.stdout.write(report.events)
    return 0


def cmd_model(args) -> int:
    tiles = args.tiles
    t_k, t_n = args.array if args.array else (tiles.t_k, tiles.t_n)
    rows = analytic.model_rows(t_k, t_n, tiles.t_m)
    out = _out(args)
    text = _write_csv(rows, out / "model.csv" if out else None)
    if out is None:
        sys.stdout.write(text)
    return 0


def cmd_sweep_batch(args) -> int:
    tiles = args.tiles
    _check_array(args, tiles)
    policy = _policy(args)
    layers = _load_layers(args)
    if len(layers) != 1:
        raise UsageError("sweep-batch takes exactly one layer (--layer NAME or a one-line file)")
    layer = layers[0]
    rows = sweep_batch(layer, args.batches, policy, tiles, _core(args), jobs=args.jobs)
    out = _out(args)
    text = _write_csv(rows, out / f"sweep_{safe_name(layer.name)}.csv" if out else None)
    if out is None:
        sys.stdout.write(text)
    else:
        svg = line_chart(
            {
                policy.name: [(r["batch"], float(r["normalized"])) for r in rows],
                "asymptote": [(r["batch"], float(r["asymptote"])) for r in rows],
            },
            f"{layer.name}: normalized runtime vs batch",
            "batch size",
            "normalized runtime",
            logx=True,
        )
        (out / f"sweep_{safe_name(layer.name)}.svg").write_text(svg)
    return 0


def cmd_fig2(args) -> int:
    arrays = args.arrays or list(SWEEP_ARRAYS)
    points = utilization_points(arrays, range(1, args.tm_max + 1))
    rows = [
        {"rows": p.rows, "cols": p.cols, "t_m": p.t_m, "utilization": float(p.utilization)}
        for p in sorted(points, key=lambda p: (p.rows, p.cols, p.t_m))
    ]
    out = _out(args)
    text = _write_csv(rows, out / "fig2.csv" if out else None)
    if out is None:
        sys.stdout.write(text)
    else:
        series: dict[str, list] = {}
        for p in points:
            series.setdefault(f"{p.rows}x{p.cols}", []).append((p.t_m, float(p.utilization)))
        (out / "fig2.svg").write_text(line_chart(series, "PE utilization vs T_M", "T_M", "utilization"))
    return 0


def cmd_report(args) -> int:
    tiles = args.tiles
    _check_array(args, tiles)
    layers = _load_layers(args)
    if not args.full:
        layers = [reduced_layer(l, args.reduced_batch, args.spatial) for l in layers]
    rows = policy_report(layers, tuple(DESIGNS), tiles, _core(args), jobs=args.jobs)
    out = _out(args)
    text = _write_csv(rows, out / "report.csv" if out else None)
    if out is None:
        sys.stdout.write(text)
    else:
        groups: dict[str, dict[str, float]] = {}
        for r in rows:
            groups.setdefault(r["layer"], {})[r["design"]] = r["normalized"]
        (out / "report.svg").write_text(bar_chart(groups, "Runtime normalized to base", "normalized runtime"))
        with open(out / "report.jsonl", "w") as fh:
            for r in rows:
                fh.write(json.dumps({k: _cell(v) for k, v in r.items()}, sort_keys=True) + "\n")
    return 0


# -- parser -----------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    # a fresh parent per subcommand: argparse shares parent actions, so set_defaults would leak
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--array", type=_pair, help="weight tile as T_KxT_N (must agree with --tiles)")
    common.add_argument("--tiles", type=_tiles, default=TileDims(), help="TMxTKxTN (default 16x32x16)")
    common.add_argument("--pe", choices=[p.value for p in PEVariant], default="baseline")
    common.add_argument("--policy", choices=[c.value for c in Control], default="base")
    common.add_argument("--prefetch", choices=[p.value for p in Prefetch], default="row-chasing")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory")
    common.add_argument("--trace-cycles", action="store_true", help="dump the per-cycle stage log")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("--tl-latency", type=int, default=CoreConfig.tl_latency)
    common.add_argument("--ts-latency", type=int, default=CoreConfig.ts_latency)
    return common


def build_parser() -> argparse.ArgumentParser:

    layers = argparse.ArgumentParser(add_help=False)
    layers.add_argument("file", nargs="?", help="layer descriptor file")
    layers.add_argument("--layer", action="append", help="built-in layer name (repeatable)")
    layers.add_argument("--batch", type=int, help="override the batch size N")

    parser = argparse.ArgumentParser(prog="matengine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lower", parents=[_common(), layers], help="lower layers to tile traces")
    p.add_argument("--gemm", type=lambda s: tuple(int(v) for v in s.lower().split("x")), help="MxKxN GEMM")
    p.set_defaults(func=cmd_lower)

    p = sub.add_parser("sim", parents=[_common()], help="simulate a trace file")
    p.add_argument("trace")
    p.add_argument("--functional", action="store_true", help="move real data (random operands from --seed)")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("model", parents=[_common()], help="closed-form latency/II table")
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("sweep-batch", parents=[_common(), layers], help="normalized runtime vs batch size")
    p.add_argument("--batches", type=_int_list, default=[1, 2, 4, 8, 16])
    p.set_defaults(func=cmd_sweep_batch, pe="dmdb", policy="wls")

    p = sub.add_parser("fig2", parents=[_common()], help="utilization vs T_M per array size")
    p.add_argument("--arrays", type=lambda s: [_pair(v) for v in s.split(",")], help="e.g. 4x4,8x8")
    p.add_argument("--tm-max", type=int, default=64)
    p.set_defaults(func=cmd_fig2)

    p = sub.add_parser("report", parents=[_common(), layers], help="policy comparison over layers")
    p.add_argument("--full", action="store_true", help="use layer sizes as given (slow for conv layers)")
    p.add_argument("--reduced-batch", type=int, default=32)
    p.add_argument("--spatial", type=int, default=14)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, TraceSyntaxError, LayerSyntaxError, ValueError, OSError) as exc:
        print(f"matengine: error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, EngineConsistencyError) as exc:
        print(f"matengine: simulation error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
