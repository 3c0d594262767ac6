"""Layer descriptors to GEMMs, tiling plans and tile-instruction traces.

Convolutions are lowered with im2col. ``X``/``R`` index rows and ``Y``/``S``
columns, so GEMM rows run over ``(batch, out_row, out_col)`` and the reduction
over ``(channel, filter_row, filter_col)``.

The tiling walks output tiles in 2 x 2 blocks with fixed register roles:

    treg0..3  C accumulators   (m0,n0) (m1,n0) (m0,n1) (m1,n1)
    treg4, 5  B tiles          n0, n1
    treg6, 7  A tiles          m0, m1

Blocks go n-pair outer, m-pair inner; inside a block k is innermost and each
B tile feeds two back-to-back MMs so the second can bypass its weight load.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .isa import (
    NUM_REGS,
    ROW_BYTES,
    TILE_ROWS,
    Instruction,
    Trace,
    header_problems,
    pack_a,
    pack_b,
    pack_c,
)

C_REGS = {(0, 0): 0, (1, 0): 1, (0, 1): 2, (1, 1): 3}
B_REGS = (4, 5)
A_REGS = (6, 7)


@dataclass(frozen=True)
class ConvLayer:
    name: str
    n: int
    k: int
    c: int
    x: int
    y: int
    r: int
    s: int
    stride: int = 1
    pad: int | None = None

    def __post_init__(self):
        if self.pad is None:
            object.__setattr__(self, "pad", self.r // 2)
        for f in ("n", "k", "c", "x", "y", "r", "s", "stride"):
            if getattr(self, f) < 1:
                raise ValueError(f"{self.name}: {f} must be positive, got {getattr(self, f)}")
        if self.pad < 0:
            raise ValueError(f"{self.name}: pad must be non-negative")
        self.out_dims  # validates

    @property
    def out_dims(self) -> tuple[int, int]:
        dims = []
        for size, filt in ((self.x, self.r), (self.y, self.s)):
            span = size - filt + 2 * self.pad
            if span < 0 or span % self.stride:
                raise ValueError(
                    f"{self.name}: ({size} - {filt} + 2*{self.pad}) is not a non-negative multiple "
                    f"of stride {self.stride}; output size would not be an integer"
                )
            dims.append(span // self.stride + 1)
        return dims[0], dims[1]


@dataclass(frozen=True)
class FcLayer:
    name: str
    n: int
    nin: int
    non: int

    def __post_init__(self):
        for f in ("n", "nin", "non"):
            if getattr(self, f) < 1:
                raise ValueError(f"{self.name}: {f} must be positive, got {getattr(self, f)}")


Layer = ConvLayer | FcLayer


@dataclass(frozen=True)
class GemmDims:
    m: int
    n: int
    k: int

    def __post_init__(self):
        if min(self.m, self.n, self.k) < 1:
            raise ValueError(f"GEMM dims must be positive, got {self}")


@dataclass(frozen=True)
class TileDims:
    t_m: int = 16
    t_k: int = 32
    t_n: int = 16

    def __post_init__(self):
        problems = header_problems(self.t_m, self.t_k, self.t_n)
        if problems:
            raise ValueError("tile larger than register capacity: " + "; ".join(problems))

    @classmethod
    def parse(cls, text: str) -> "TileDims":
        parts = text.lower().split("x")
        if len(parts) != 3:
            raise ValueError(f"tiles must look like TMxTKxTN, got {text!r}")
        return cls(*(int(p) for p in parts))


def conv_to_gemm(layer: ConvLayer) -> GemmDims:
    ox, oy = layer.out_dims
    return GemmDims(m=layer.n * ox * oy, n=layer.k, k=layer.c * layer.r * layer.s)


def fc_to_gemm(layer: FcLayer) -> GemmDims:
    return GemmDims(m=layer.n, n=layer.non, k=layer.nin)


def to_gemm(layer: Layer) -> GemmDims:
    return conv_to_gemm(layer) if isinstance(layer, ConvLayer) else fc_to_gemm(layer)


def with_batch(layer: Layer, n: int) -> Layer:
    return replace(layer, n=n)


def im2col(inputs: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """``inputs`` is ``(N, C, X, Y)``; returns the ``M x K`` activation matrix."""
    n, c, x, y = inputs.shape
    if (n, c, x, y) != (layer.n, layer.c, layer.x, layer.y):
        raise ValueError(f"input shape {inputs.shape} does not match {layer}")
    p, st = layer.pad, layer.stride
    padded = np.pad(inputs, ((0, 0), (0, 0), (p, p), (p, p)))
    ox, oy = layer.out_dims
    view = np.lib.stride_tricks.sliding_window_view(padded, (layer.r, layer.s), axis=(2, 3))
    view = view[:, :, ::st, ::st][:, :, :ox, :oy]  # N, C, OX, OY, R, S
    return view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ox * oy, c * layer.r * layer.s)


def filters_to_gemm(weights: np.ndarray) -> np.ndarray:
    """``(K, C, R, S)`` filters to the ``K_red x K`` weight matrix."""
    return weights.reshape(weights.shape[0], -1).T


# -- tiling ------------------------------------------------------------------


def _ceil(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class Block:
    ms: tuple[int, ...]
    ns: tuple[int, ...]


@dataclass(frozen=True)
class Fold:
    m: int
    n: int
    k: int
    dst: int
    a_reg: int
    b_reg: int


@dataclass(frozen=True)
class TilingPlan:
    dims: GemmDims
    tiles: TileDims
    blocks: tuple[Block, ...]

    @property
    def folds(self) -> tuple[int, int, int]:
        d, t = self.dims, self.tiles
        return _ceil(d.m, t.t_m), _ceil(d.k, t.t_k), _ceil(d.n, t.t_n)

    @property
    def mm_count(self) -> int:
        mt, kt, nt = self.folds
        return mt * kt * nt

    def block_folds(self, block: Block) -> Iterator[Fold]:
        for k in range(self.folds[1]):
            for j, n in enumerate(block.ns):
                for i, m in enumerate(block.ms):
                    yield Fold(m, n, k, C_REGS[i, j], A_REGS[i], B_REGS[j])

    def schedule(self) -> Iterator[Fold]:
        for block in self.blocks:
            yield from self.block_folds(block)


def plan_tiles(dims: GemmDims, tiles: TileDims = TileDims()) -> TilingPlan:
    if not isinstance(tiles, TileDims):
        tiles = TileDims(*tiles)
    mt, _, nt = _ceil(dims.m, tiles.t_m), 0, _ceil(dims.n, tiles.t_n)
    blocks = []
    for n0 in range(0, nt, 2):
        ns = tuple(range(n0, min(n0 + 2, nt)))
        for m0 in range(0, mt, 2):
            blocks.append(Block(tuple(range(m0, min(m0 + 2, mt))), ns))
    used = {r for b in blocks for i in range(len(b.ms)) for j in range(len(b.ns))
            for r in (C_REGS[i, j], A_REGS[i], B_REGS[j])}
    if len(used) > NUM_REGS:
        raise ValueError(f"plan needs {len(used)} live tiles, only {NUM_REGS} registers")
    return TilingPlan(dims, tiles, tuple(blocks))


# -- memory layout -------------------------------------------------------------


@dataclass(frozen=True)
class GemmLayout:
    """Tile-pitched, zero-padded operand placement in a flat byte image.

    Every tile starts on its own 16-row group and 64-byte column slot, so a
    single TL or TS of 16 rows x 64 B moves exactly one (padded) tile.
    """

    plan: TilingPlan
    a_base: int
    b_base: int
    c_base: int
    size: int

    @classmethod
    def for_plan(cls, plan: TilingPlan, base: int = 0) -> "GemmLayout":
        mt, kt, nt = plan.folds
        a_bytes = mt * TILE_ROWS * kt * ROW_BYTES
        b_bytes = kt * TILE_ROWS * nt * ROW_BYTES
        c_bytes = mt * TILE_ROWS * nt * ROW_BYTES
        return cls(plan, base, base + a_bytes, base + a_bytes + b_bytes, base + a_bytes + b_bytes + c_bytes)

    @property
    def a_stride(self) -> int:
        return self.plan.folds[1] * ROW_BYTES

    @property
    def b_stride(self) -> int:
        return self.plan.folds[2] * ROW_BYTES

    @property
    def c_stride(self) -> int:
        return self.plan.folds[2] * ROW_BYTES

    def a_tile(self, m: int, k: int) -> int:
        return self.a_base + m * TILE_ROWS * self.a_stride + k * ROW_BYTES

    def b_tile(self, k: int, n: int) -> int:
        return self.b_base + k * TILE_ROWS * self.b_stride + n * ROW_BYTES

    def c_tile(self, m: int, n: int) -> int:
        return self.c_base + m * TILE_ROWS * self.c_stride + n * ROW_BYTES

    def _tile_view(self, image: np.ndarray, addr: int, stride: int) -> np.ndarray:
        rows = [image[addr + r * stride : addr + r * stride + ROW_BYTES] for r in range(TILE_ROWS)]
        return np.stack(rows)

    def _put(self, image: np.ndarray, addr: int, stride: int, payload: np.ndarray) -> None:
        for r in range(TILE_ROWS):
            image[addr + r * stride : addr + r * stride + ROW_BYTES] = payload[r]

    def build_image(self, a: np.ndarray, b: np.ndarray, c: np.ndarray | None = None) -> np.ndarray:
        d, t = self.plan.dims, self.plan.tiles
        a = np.asarray(a, np.float32)
        b = np.asarray(b, np.float32)
        c = np.zeros((d.m, d.n), np.float32) if c is None else np.asarray(c, np.float32)
        if a.shape != (d.m, d.k) or b.shape != (d.k, d.n) or c.shape != (d.m, d.n):
            raise ValueError(f"operands A{a.shape} B{b.shape} C{c.shape} do not match {d}")
        mt, kt, nt = self.plan.folds
        a_p = np.zeros((mt * t.t_m, kt * t.t_k), np.float32)
        a_p[: d.m, : d.k] = a
        b_p = np.zeros((kt * t.t_k, nt * t.t_n), np.float32)
        b_p[: d.k, : d.n] = b
        c_p = np.zeros((mt * t.t_m, nt * t.t_n), np.float32)
        c_p[: d.m, : d.n] = c
        image = np.zeros(self.size, np.uint8)
        for m in range(mt):
            rows = slice(m * t.t_m, (m + 1) * t.t_m)
            for k in range(kt):
                tile = a_p[rows, k * t.t_k : (k + 1) * t.t_k]
                self._put(image, self.a_tile(m, k), self.a_stride, pack_a(tile))
            for n in range(nt):
                tile = c_p[rows, n * t.t_n : (n + 1) * t.t_n]
                self._put(image, self.c_tile(m, n), self.c_stride, pack_c(tile))
        for k in range(kt):
            for n in range(nt):
                tile = b_p[k * t.t_k : (k + 1) * t.t_k, n * t.t_n : (n + 1) * t.t_n]
                self._put(image, self.b_tile(k, n), self.b_stride, pack_b(tile))
        return image

    def read_c(self, image: np.ndarray) -> np.ndarray:
        d, t = self.plan.dims, self.plan.tiles
        mt, _, nt = self.plan.folds
        out = np.zeros((mt * t.t_m, nt * t.t_n), np.float32)
        for m in range(mt):
            for n in range(nt):
                words = self._tile_view(image, self.c_tile(m, n), self.c_stride)
                floats = np.ascontiguousarray(words).view("<f4")
                out[m * t.t_m : (m + 1) * t.t_m, n * t.t_n : (n + 1) * t.t_n] = floats[: t.t_m, : t.t_n]
        return out[: d.m, : d.n]


def emit_trace(plan: TilingPlan, layout: GemmLayout | None = None) -> Trace:
    """TL C / (TL B, TL A, MM)* / TS C per block.

    A TL is left out when its register still holds the very same tile and
    nothing has written the register since.
    """
    layout = layout or GemmLayout.for_plan(plan)
    body: list[Instruction] = []
    holds: dict[int, tuple] = {}

    def load(reg: int, key: tuple, addr: int, stride: int) -> None:
        if holds.get(reg) == key:
            return
        body.append(Instruction.tl(reg, addr, stride))
        holds[reg] = key

    for block in plan.blocks:
        c_tiles = [(i, j, m, n) for j, n in enumerate(block.ns) for i, m in enumerate(block.ms)]
        for i, j, m, n in sorted(c_tiles, key=lambda x: C_REGS[x[0], x[1]]):
            reg = C_REGS[i, j]
            body.append(Instruction.tl(reg, layout.c_tile(m, n), layout.c_stride))
            holds[reg] = ("C", m, n)
        for f in plan.block_folds(block):
            load(f.b_reg, ("B", f.k, f.n), layout.b_tile(f.k, f.n), layout.b_stride)
            load(f.a_reg, ("A", f.m, f.k), layout.a_tile(f.m, f.k), layout.a_stride)
            body.append(Instruction.mm(f.dst, f.a_reg, f.b_reg))
            holds[f.dst] = None
        for i, j, m, n in sorted(c_tiles, key=lambda x: C_REGS[x[0], x[1]]):
            body.append(Instruction.ts(layout.c_tile(m, n), layout.c_stride, C_REGS[i, j]))
    t = plan.tiles
    return Trace(t.t_m, t.t_k, t.t_n, tuple(body))


# -- descriptors ---------------------------------------------------------------


class LayerSyntaxError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


_CONV_FIELDS = ("n", "k", "c", "x", "y", "r", "s")
_FC_FIELDS = ("n", "nin", "non")


def parse_layers(text: str) -> list[Layer]:
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *fields = line.split()
        try:
            values = dict(f.split("=", 1) for f in fields)
        except ValueError:
            raise LayerSyntaxError(lineno, f"fields must be key=value: {line!r}") from None
        name = values.pop("name", f"layer{lineno}")
        if kind == "conv":
            required, optional = _CONV_FIELDS, ("stride", "pad")
        elif kind == "fc":
            required, optional = _FC_FIELDS, ()
        else:
            raise LayerSyntaxError(lineno, f"unknown layer kind {kind!r} (want conv or fc)")
        missing = [f for f in required if f not in values]
        unknown = sorted(set(values) - set(required) - set(optional))
        if missing or unknown:
            parts = []
            if missing:
                parts.append("missing " + ", ".join(missing))
            if unknown:
                parts.append("unknown " + ", ".join(unknown))
            raise LayerSyntaxError(lineno, "; ".join(parts))
        try:
            nums = {k: int(v) for k, v in values.items()}
        except ValueError as exc:
            raise LayerSyntaxError(lineno, f"bad number: {exc}") from None
        try:
            layers.append(ConvLayer(name, **nums) if kind == "conv" else FcLayer(name, **nums))
        except ValueError as exc:
            raise LayerSyntaxError(lineno, str(exc)) from None
    return layers


def format_layer(layer: Layer) -> str:
    if isinstance(layer, ConvLayer):
        dims = " ".join(f"{f}={getattr(layer, f)}" for f in _CONV_FIELDS)
        return f"conv name={layer.name} {dims} stride={layer.stride} pad={layer.pad}"
    return f"fc name={layer.name} n={layer.n} nin={layer.nin} non={layer.non}"


BUILTIN_LAYERS: dict[str, Layer] = {
    layer.name: layer
    for layer in (
        ConvLayer("ResNet50-1", n=32, k=64, c=64, x=56, y=56, r=1, s=1),
        ConvLayer("ResNet50-2", n=32, k=64, c=64, x=56, y=56, r=3, s=3),
        ConvLayer("ResNet50-3", n=32, k=512, c=1024, x=14, y=14, r=1, s=1),
        FcLayer("DLRM-1", n=512, nin=1024, non=1024),
        FcLayer("DLRM-2", n=512, nin=1024, non=64),
        FcLayer("DLRM-3", n=512, nin=2048, non=2048),
        FcLayer("BERT-1", n=256, nin=768, non=768),
        FcLayer("BERT-2", n=256, nin=3072, non=768),
        FcLayer("BERT-3", n=256, nin=768, non=3072),
    )
}


def lower(layer: Layer, tiles: TileDims = TileDims()) -> tuple[GemmDims, TilingPlan, Trace]:
    dims = to_gemm(layer)
    plan = plan_tiles(dims, tiles)
    return dims, plan, emit_trace(plan)


_NAME_RE = re.compile(r"[^A-Za-z0-9_.-]+")


def safe_name(name: str) -> str:
    return _NAME_RE.sub("_", name)
