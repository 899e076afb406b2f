"""Linear-sweep decoder for a small subset of 32-bit x86.

Covers what short activation windows typically show in compiled code:
pushes, calls, conditional and unconditional jumps, register/memory moves,
``loop``/``loopne``, ``ret`` and ``nop``. Every other byte decodes to a
one-byte ``db`` pseudo-instruction, so a window can always be rendered.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

REG32 = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi")
REG8 = ("al", "cl", "dl", "bl", "ah", "ch", "dh", "bh")
JCC = ("jo", "jno", "jb", "jae", "je", "jne", "jbe", "ja",
       "js", "jns", "jp", "jnp", "jl", "jge", "jle", "jg")

SUPPORTED_OPCODES = frozenset(
    list(range(0x50, 0x58)) + [0x6A, 0x68, 0xE8, 0xE9, 0xEB] + list(range(0x70, 0x80))
    + [0x88, 0x89, 0x8A, 0x8B] + list(range(0xB8, 0xC0)) + [0xE0, 0xE2, 0xC3, 0x90]
)


@dataclass(frozen=True)
class Instruction:
    offset: int
    length: int
    mnemonic: str
    operand_text: str = ""

    def __str__(self) -> str:
        return f"{self.mnemonic} {self.operand_text}".rstrip()


class _Truncated(Exception):
    pass


def _hex(v: int) -> str:
    return f"-0x{-v:x}" if v < 0 else f"0x{v:x}"


def _need(buf: bytes, pos: int, n: int) -> None:
    if pos + n > len(buf):
        raise _Truncated


def _modrm(buf: bytes, pos: int, width: str) -> tuple[int, str, int]:
    """Decode ModRM (+SIB, +disp) at ``pos``; returns (reg, r/m text, bytes used)."""
    _need(buf, pos, 1)
    modrm = buf[pos]
    mod, reg, rm = modrm >> 6, (modrm >> 3) & 7, modrm & 7
    regs = REG8 if width == "byte" else REG32
    if mod == 3:
        return reg, regs[rm], 1
    used = 1
    base: Optional[str]
    index = ""
    if rm == 4:
        _need(buf, pos, 2)
        sib = buf[pos + 1]
        used += 1
        scale, idx, b = 1 << (sib >> 6), (sib >> 3) & 7, sib & 7
        if idx != 4:
            index = REG32[idx] + (f"*{scale}" if scale > 1 else "")
        base = None if (b == 5 and mod == 0) else REG32[b]
        disp_size = 4 if (b == 5 and mod == 0) else (1 if mod == 1 else 4 if mod == 2 else 0)
    elif rm == 5 and mod == 0:
        base, disp_size = None, 4
    else:
        base = REG32[rm]
        disp_size = {0: 0, 1: 1, 2: 4}[mod]
    disp = 0
    if disp_size:
        _need(buf, pos + used, disp_size)
        fmt = "<b" if disp_size == 1 else "<i"
        disp = struct.unpack_from(fmt, buf, pos + used)[0]
        used += disp_size
    parts = [p for p in (base, index) if p]
    addr = "+".join(parts)
    if disp or not parts:
        if not parts:
            addr = f"0x{disp & 0xFFFFFFFF:x}"
        else:
            addr += f"{'-' if disp < 0 else '+'}0x{abs(disp):x}"
    return reg, f"{width} [{addr}]", used


def _decode_one(buf: bytes, pos: int, base: int) -> Instruction:
    op = buf[pos]
    at = base + pos

    def rel(size: int, length: int) -> str:
        _need(buf, pos, length)
        fmt = "<b" if size == 1 else "<i"
        delta = struct.unpack_from(fmt, buf, pos + length - size)[0]
        return f"0x{(at + length + delta) & 0xFFFFFFFF:x}"

    if 0x50 <= op <= 0x57:
        return Instruction(at, 1, "push", REG32[op - 0x50])
    if op == 0x6A:
        _need(buf, pos, 2)
        return Instruction(at, 2, "push", f"0x{buf[pos + 1]:x}")
    if op == 0x68:
        _need(buf, pos, 5)
        return Instruction(at, 5, "push", f"0x{struct.unpack_from('<I', buf, pos + 1)[0]:x}")
    if op == 0xE8:
        return Instruction(at, 5, "call", rel(4, 5))
    if op == 0xE9:
        return Instruction(at, 5, "jmp", rel(4, 5))
    if op == 0xEB:
        return Instruction(at, 2, "jmp", rel(1, 2))
    if 0x70 <= op <= 0x7F:
        return Instruction(at, 2, JCC[op - 0x70], rel(1, 2))
    if op == 0xE0:
        return Instruction(at, 2, "loopne", rel(1, 2))
    if op == 0xE2:
        return Instruction(at, 2, "loop", rel(1, 2))
    if 0x88 <= op <= 0x8B:
        width = "byte" if op in (0x88, 0x8A) else "dword"
        reg, rm_text, used = _modrm(buf, pos + 1, width)
        reg_text = (REG8 if width == "byte" else REG32)[reg]
        operands = f"{rm_text}, {reg_text}" if op in (0x88, 0x89) else f"{reg_text}, {rm_text}"
        return Instruction(at, 1 + used, "mov", operands)
    if 0xB8 <= op <= 0xBF:
        _need(buf, pos, 5)
        return Instruction(at, 5, "mov", f"{REG32[op - 0xB8]}, 0x{struct.unpack_from('<I', buf, pos + 1)[0]:x}")
    if op == 0xC3:
        return Instruction(at, 1, "ret")
    if op == 0x90:
        return Instruction(at, 1, "nop")
    return Instruction(at, 1, "db", f"0x{op:02x}")


def decode_at(
    data: bytes,
    offset: int,
    max_instructions: int = 64,
    end: Optional[int] = None,
) -> list[Instruction]:
    """Linear sweep from ``offset`` up to ``end`` (default: end of ``data``).

    Decoding stops, returning what was decoded so far, when an instruction
    would run past ``end``.
    """
    if not 0 <= offset < len(data):
        raise IndexError(f"offset {offset} outside buffer of {len(data)} bytes")
    stop = len(data) if end is None else min(end, len(data))
    buf = bytes(data[offset:stop])
    out: list[Instruction] = []
    pos = 0
    while pos < len(buf) and len(out) < max_instructions:
        try:
            ins = _decode_one(buf, pos, offset)
        except _Truncated:
            break
        out.append(ins)
        pos += ins.length
    return out


def printable_view(chunk: bytes, min_run: int = 4) -> str:
    """Printable ASCII runs of at least ``min_run`` characters; '.' elsewhere."""
    out = ["."] * len(chunk)
    run_start = None
    for i, b in enumerate(bytes(chunk) + b"\x00"):
        if 0x20 <= b < 0x7F:
            if run_start is None:
                run_start = i
        elif run_start is not None:
            if i - run_start >= min_run:
                out[run_start:i] = chunk[run_start:i].decode("ascii")
            run_start = None
    return "".join(out)


@dataclass
class WindowRendering:
    offset: int
    length: int
    instructions: list[Instruction] = field(default_factory=list)
    strings: str = ""

    def string_lines(self, width: int = 8, base: int = 0) -> list[str]:
        return [
            f"(0x{base + self.offset + i:x}): {self.strings[i:i + width]}"
            for i in range(0, len(self.strings), width)
        ]

    def instruction_lines(self, base: int = 0) -> list[str]:
        return [f"(0x{base + ins.offset:x}): {ins}" for ins in self.instructions]

    def to_dict(self) -> dict:
        return {
            "offset": self.offset,
            "length": self.length,
            "strings": self.strings,
            "instructions": [
                {"offset": i.offset, "length": i.length, "text": str(i)} for i in self.instructions
            ],
        }


def annotate_window(data: bytes, offset: int, window: int) -> WindowRendering:
    """Instruction listing and string dump over ``data[offset:offset+window]``.

    Bytes left over when the last instruction would cross the window edge
    are listed as ``db`` so both views cover the same bytes.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    offset = max(0, offset)
    end = min(len(data), offset + window)
    if offset >= end:
        return WindowRendering(offset, 0)
    instructions = decode_at(data, offset, max_instructions=end - offset, end=end)
    pos = offset + sum(i.length for i in instructions)
    while pos < end:
        instructions.append(Instruction(pos, 1, "db", f"0x{data[pos]:02x}"))
        pos += 1
    return WindowRendering(offset, end - offset, instructions, printable_view(data[offset:end]))
