"""Tile instruction set: registers, instructions and the trace text format.

Eight tile registers of 16 rows x 64 bytes. Three instructions::

    TL treg<r>, 0x<base>, <stride>      load 16 rows of 64 B, rows ``stride`` bytes apart
    TS 0x<base>, <stride>, treg<r>      store a register back to memory
    MM treg<c>, treg<a>, treg<b>        C += A x B  (A, B bf16; C fp32)

Inside a register an A tile is row-major bf16 (16 x 32), a C tile row-major
fp32 (16 x 16) and a B tile holds bf16 pairs: register row ``p`` stores
``B[2p, n], B[2p + 1, n]`` for every column ``n``, which fits a 32 x 16 bf16
weight block in 16 rows of 64 B.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping

import ml_dtypes
import numpy as np

NUM_REGS = 8
TILE_ROWS = 16
ROW_BYTES = 64
TILE_BYTES = TILE_ROWS * ROW_BYTES

BF16 = np.dtype(ml_dtypes.bfloat16)


class ElementType(Enum):
    BF16 = "bf16"
    FP32 = "fp32"

    @property
    def size(self) -> int:
        return 2 if self is ElementType.BF16 else 4


@dataclass(frozen=True)
class TileShape:
    rows: int = TILE_ROWS
    cols_bytes: int = ROW_BYTES
    element_type: ElementType = ElementType.BF16

    def __post_init__(self):
        if not 1 <= self.rows <= TILE_ROWS:
            raise ValueError(f"tile rows must be in [1, {TILE_ROWS}], got {self.rows}")
        if not 1 <= self.cols_bytes <= ROW_BYTES:
            raise ValueError(f"tile row bytes must be in [1, {ROW_BYTES}], got {self.cols_bytes}")
        if self.cols_bytes % self.element_type.size:
            raise ValueError(
                f"{self.cols_bytes} B rows do not hold whole {self.element_type.value} elements"
            )

    @property
    def elements_per_row(self) -> int:
        return self.cols_bytes // self.element_type.size


class Opcode(Enum):
    TL = "TL"
    TS = "TS"
    MM = "MM"


@dataclass(frozen=True)
class Instruction:
    """``regs`` is ``(r,)`` for TL/TS and ``(dst, src_a, src_b)`` for MM."""

    kind: Opcode
    regs: tuple[int, ...]
    base: int = 0
    stride: int = 0
    line: int | None = field(default=None, compare=False, repr=False)

    @classmethod
    def tl(cls, reg: int, base: int, stride: int) -> "Instruction":
        return cls(Opcode.TL, (reg,), base, stride)

    @classmethod
    def ts(cls, base: int, stride: int, reg: int) -> "Instruction":
        return cls(Opcode.TS, (reg,), base, stride)

    @classmethod
    def mm(cls, dst: int, src_a: int, src_b: int) -> "Instruction":
        return cls(Opcode.MM, (dst, src_a, src_b))

    @property
    def reg(self) -> int:
        return self.regs[0]

    @property
    def dst(self) -> int:
        return self.regs[0]

    @property
    def src_a(self) -> int:
        return self.regs[1]

    @property
    def src_b(self) -> int:
        return self.regs[2]

    def __str__(self) -> str:
        if self.kind is Opcode.TL:
            return f"TL treg{self.reg}, 0x{self.base:x}, {self.stride}"
        if self.kind is Opcode.TS:
            return f"TS 0x{self.base:x}, {self.stride}, treg{self.reg}"
        return f"MM treg{self.dst}, treg{self.src_a}, treg{self.src_b}"


@dataclass(frozen=True)
class Trace:
    t_m: int = 16
    t_k: int = 32
    t_n: int = 16
    body: tuple[Instruction, ...] = ()
    in_type: ElementType = ElementType.BF16
    out_type: ElementType = ElementType.FP32

    def __post_init__(self):
        problems = header_problems(self.t_m, self.t_k, self.t_n)
        if problems:
            raise ValueError("; ".join(problems))
        object.__setattr__(self, "body", tuple(self.body))

    def count(self, kind: Opcode) -> int:
        return sum(1 for ins in self.body if ins.kind is kind)

    @property
    def mm_count(self) -> int:
        return self.count(Opcode.MM)


def header_problems(t_m: int, t_k: int, t_n: int) -> list[str]:
    problems = []
    if not 1 <= t_m <= TILE_ROWS:
        problems.append(f"t_m={t_m} exceeds {TILE_ROWS} register rows")
    if not 2 <= t_k <= ROW_BYTES // 2 or t_k % 2:
        problems.append(f"t_k={t_k} must be even and at most {ROW_BYTES // 2} bf16 elements")
    if not 1 <= t_n <= ROW_BYTES // 4:
        problems.append(f"t_n={t_n} exceeds {ROW_BYTES // 4} fp32 elements per row")
    return problems


class TraceSyntaxError(ValueError):
    def __init__(self, line: int, column: int, message: str):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


_REG = r"treg(\d+)"
_NUM = r"(0x[0-9a-fA-F]+|\d+)"
_PATTERNS = {
    "TL": re.compile(rf"TL\s+{_REG}\s*,\s*{_NUM}\s*,\s*{_NUM}\s*$"),
    "TS": re.compile(rf"TS\s+{_NUM}\s*,\s*{_NUM}\s*,\s*{_REG}\s*$"),
    "MM": re.compile(rf"MM\s+{_REG}\s*,\s*{_REG}\s*,\s*{_REG}\s*$"),
}
_HEADER = re.compile(r"machine((?:\s+\w+=\w+)*)\s*$")


def _reg(match: re.Match, group: int, lineno: int, offset: int) -> int:
    value = int(match.group(group))
    if value >= NUM_REGS:
        raise TraceSyntaxError(
            lineno, offset + match.start(group) - 4, f"register id treg{value} out of range [0, 7]"
        )
    return value


def parse_trace(text: str) -> Trace:
    header = None
    body: list[Instruction] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].rstrip()
        stripped = content.lstrip()
        if not stripped:
            continue
        col0 = len(content) - len(stripped)
        if header is None:
            m = _HEADER.match(stripped)
            if not m:
                raise TraceSyntaxError(lineno, col0 + 1, "expected 'machine t_m=.. t_k=.. t_n=..' header")
            header = _parse_header(m.group(1), lineno)
            continue
        opcode = stripped[:2]
        pattern = _PATTERNS.get(opcode)
        m = pattern.match(stripped) if pattern else None
        if m is None:
            raise TraceSyntaxError(lineno, col0 + 1, f"cannot parse instruction {stripped!r}")
        if opcode == "TL":
            ins = Instruction(
                Opcode.TL,
                (_reg(m, 1, lineno, col0 + 1),),
                int(m.group(2), 0),
                int(m.group(3), 0),
                line=lineno,
            )
        elif opcode == "TS":
            ins = Instruction(
                Opcode.TS,
                (_reg(m, 3, lineno, col0 + 1),),
                int(m.group(1), 0),
                int(m.group(2), 0),
                line=lineno,
            )
        else:
            regs = tuple(_reg(m, g, lineno, col0 + 1) for g in (1, 2, 3))
            ins = Instruction(Opcode.MM, regs, line=lineno)
        body.append(ins)
    if header is None:
        raise TraceSyntaxError(1, 1, "missing machine header")
    return Trace(body=tuple(body), **header)


def _parse_header(fields: str, lineno: int) -> dict:
    values = dict(item.split("=", 1) for item in fields.split())
    required = ("t_m", "t_k", "t_n")
    missing = [k for k in required if k not in values]
    if missing:
        raise TraceSyntaxError(lineno, 1, f"header missing {', '.join(missing)}")
    unknown = set(values) - {"t_m", "t_k", "t_n", "in", "out"}
    if unknown:
        raise TraceSyntaxError(lineno, 1, f"unknown header field(s) {', '.join(sorted(unknown))}")
    try:
        dims = {k: int(values[k]) for k in required}
    except ValueError as exc:
        raise TraceSyntaxError(lineno, 1, f"bad tile dimension: {exc}") from None
    if values.get("in", "bf16") != "bf16" or values.get("out", "fp32") != "fp32":
        raise TraceSyntaxError(lineno, 1, "only in=bf16 out=fp32 is supported")
    problems = header_problems(**dims)
    if problems:
        raise TraceSyntaxError(lineno, 1, "; ".join(problems))
    return dims


def format_trace(trace: Trace) -> str:
    lines = [
        f"machine t_m={trace.t_m} t_k={trace.t_k} t_n={trace.t_n} "
        f"in={trace.in_type.value} out={trace.out_type.value}"
    ]
    lines.extend(str(ins) for ins in trace.body)
    return "\n".join(lines) + "\n"


def validate(
    instr: Instruction,
    shape: TileShape = TileShape(),
    reg_types: Mapping[int, ElementType] | None = None,
) -> list[str]:
    """Problems with one instruction; an empty list means it is well formed.

    ``reg_types`` optionally tags registers with the element type they hold so
    MM operand types can be checked (A and B bf16, C fp32).
    """
    problems = []
    for r in instr.regs:
        if not 0 <= r < NUM_REGS:
            problems.append(f"register id treg{r} out of range [0, {NUM_REGS - 1}]")
    if instr.kind is Opcode.MM:
        if len(instr.regs) != 3:
            problems.append("MM takes three register operands")
        else:
            if instr.dst in (instr.src_a, instr.src_b):
                problems.append(f"MM accumulator treg{instr.dst} aliases a source operand")
            if reg_types is not None:
                want = {instr.dst: ElementType.FP32, instr.src_a: ElementType.BF16, instr.src_b: ElementType.BF16}
                for role, r in (("C", instr.dst), ("A", instr.src_a), ("B", instr.src_b)):
                    have = reg_types.get(r)
                    if have is not None and have is not want[r]:
                        problems.append(f"MM operand {role} in treg{r} is {have.value}, needs {want[r].value}")
    else:
        if len(instr.regs) != 1:
            problems.append(f"{instr.kind.value} takes one register operand")
        if instr.base < 0:
            problems.append(f"negative base address {instr.base}")
        elif instr.base % 4:
            problems.append(f"base address 0x{instr.base:x} is not 4-byte aligned")
        if instr.stride % 4:
            problems.append(f"stride {instr.stride} is not a multiple of 4 bytes")
        elif instr.stride < shape.cols_bytes:
            problems.append(f"stride {instr.stride} is shorter than a {shape.cols_bytes} B tile row")
    return problems


def validate_trace(trace: Trace, reg_types: Mapping[int, ElementType] | None = None) -> list[str]:
    out = []
    for index, ins in enumerate(trace.body):
        where = f"line {ins.line}" if ins.line is not None else f"instruction {index}"
        out.extend(f"{where}: {p}" for p in validate(ins, reg_types=reg_types))
    return out


# -- register file -----------------------------------------------------------


def empty_payload() -> np.ndarray:
    return np.zeros((TILE_ROWS, ROW_BYTES), dtype=np.uint8)


@dataclass(frozen=True)
class TileRegisterFile:
    """Eight tile payloads plus dirty bits. Updates return a new register file.

    Payloads may be ``None`` when only timing is simulated.
    """

    regs: tuple = (None,) * NUM_REGS
    dirty: tuple[bool, ...] = (False,) * NUM_REGS

    @classmethod
    def zeros(cls) -> "TileRegisterFile":
        return cls(tuple(empty_payload() for _ in range(NUM_REGS)))

    def read(self, reg: int) -> np.ndarray | None:
        return self.regs[reg]

    def consume_weight(self, reg: int) -> "TileRegisterFile":
        if not self.dirty[reg]:
            return self
        dirty = list(self.dirty)
        dirty[reg] = False
        return replace(self, dirty=tuple(dirty))


def apply_write(rf: TileRegisterFile, reg: int, payload: np.ndarray | None) -> TileRegisterFile:
    if not 0 <= reg < NUM_REGS:
        raise IndexError(f"register id treg{reg} out of range")
    regs = list(rf.regs)
    if payload is not None:
        payload = np.array(payload, dtype=np.uint8, copy=True).reshape(TILE_ROWS, ROW_BYTES)
        payload.setflags(write=False)
    regs[reg] = payload
    dirty = list(rf.dirty)
    dirty[reg] = True
    return TileRegisterFile(tuple(regs), tuple(dirty))


# -- payload views -----------------------------------------------------------


def to_bf16(values) -> np.ndarray:
    """Round to the nearest bf16 (ties to even); returned widened to fp32."""
    return np.asarray(values, dtype=np.float32).astype(BF16).astype(np.float32)


def pack_a(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    rows, cols = a.shape
    if rows > TILE_ROWS or cols > ROW_BYTES // 2:
        raise ValueError(f"A tile {a.shape} exceeds register capacity")
    words = np.zeros((TILE_ROWS, ROW_BYTES // 2), dtype="<u2")
    words[:rows, :cols] = a.astype(BF16).view(np.uint16)
    return words.view(np.uint8)


def unpack_a(payload: np.ndarray, t_m: int, t_k: int) -> np.ndarray:
    words = np.ascontiguousarray(payload).view("<u2").reshape(TILE_ROWS, ROW_BYTES // 2)
    return words[:t_m, :t_k].copy().view(BF16).astype(np.float32)


def pack_b(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float32)
    t_k, t_n = b.shape
    if t_k % 2 or t_k > 2 * TILE_ROWS or t_n > ROW_BYTES // 4:
        raise ValueError(f"B tile {b.shape} exceeds register capacity or has odd depth")
    words = np.zeros((TILE_ROWS, ROW_BYTES // 4, 2), dtype="<u2")
    pairs = b.astype(BF16).view(np.uint16).reshape(t_k // 2, 2, t_n).transpose(0, 2, 1)
    words[: t_k // 2, :t_n, :] = pairs
    return words.reshape(TILE_ROWS, ROW_BYTES // 2).view(np.uint8)


def unpack_b(payload: np.ndarray, t_k: int, t_n: int) -> np.ndarray:
    words = np.ascontiguousarray(payload).view("<u2").reshape(TILE_ROWS, ROW_BYTES // 4, 2)
    pairs = words[: t_k // 2, :t_n, :].transpose(0, 2, 1).reshape(t_k, t_n)
    return pairs.copy().view(BF16).astype(np.float32)


def pack_c(c: np.ndarray, into: np.ndarray | None = None) -> np.ndarray:
    c = np.asarray(c, dtype="<f4")
    rows, cols = c.shape
    if rows > TILE_ROWS or cols > ROW_BYTES // 4:
        raise ValueError(f"C tile {c.shape} exceeds register capacity")
    out = empty_payload() if into is None else np.array(into, dtype=np.uint8, copy=True)
    floats = out.view("<f4").reshape(TILE_ROWS, ROW_BYTES // 4)
    floats[:rows, :cols] = c
    return out


def unpack_c(payload: np.ndarray, t_m: int, t_n: int) -> np.ndarray:
    floats = np.ascontiguousarray(payload).view("<f4").reshape(TILE_ROWS, ROW_BYTES // 4)
    return floats[:t_m, :t_n].astype(np.float32)


def register_roles(body: Iterable[Instruction]) -> dict[int, ElementType]:
    """Infer element types from MM operand positions (first use wins)."""
    roles: dict[int, ElementType] = {}
    for ins in body:
        if ins.kind is Opcode.MM and len(ins.regs) == 3:
            roles.setdefault(ins.dst, ElementType.FP32)
            roles.setdefault(ins.src_a, ElementType.BF16)
            roles.setdefault(ins.src_b, ElementType.BF16)
    return roles
