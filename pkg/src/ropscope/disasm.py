"""Table-driven decoder for the x86-64 subset plus recursive page disassembly.

The decoder is total: any byte string yields either an Instruction or None
(the invalid marker, always consuming one byte). Register effects are kept at
full 64-bit register granularity: sub-register operands alias their parent,
and 32-bit destination writes count as full-register writes because the
hardware zero-extends them.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum, auto
from typing import Iterable, Iterator

from ropscope.snapshot import PAGE_SIZE, MemoryImage, PageRecord, UnmappedRead

MASK64 = (1 << 64) - 1

# Unassigned opcode used as inert filler by the synthesizer; decodes to None.
POISON_BYTE = 0x06


class Reg(IntEnum):
    """The sixteen general-purpose registers, in hardware encoding order."""

    RAX = 0
    RCX = 1
    RDX = 2
    RBX = 3
    RSP = 4
    RBP = 5
    RSI = 6
    RDI = 7
    R8 = 8
    R9 = 9
    R10 = 10
    R11 = 11
    R12 = 12
    R13 = 13
    R14 = 14
    R15 = 15


_NAME64 = [
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
]
_NAME32 = [
    "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
    "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d",
]
_NAME8 = [
    "al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil",
    "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b", "r15b",
]
_NAME8_HIGH = {Reg.RAX: "ah", Reg.RCX: "ch", Reg.RDX: "dh", Reg.RBX: "bh"}


def reg_name(reg: Reg, width: int = 64, high8: bool = False) -> str:
    if high8:
        return _NAME8_HIGH[reg]
    if width == 8:
        return _NAME8[reg]
    if width == 32:
        return _NAME32[reg]
    return _NAME64[reg]


class Mnemonic(Enum):
    MOV = auto()
    LEA = auto()
    ADD = auto()
    SUB = auto()
    IMUL = auto()
    IDIV = auto()  # listed for completeness; the decoder never emits it
    POP = auto()
    PUSH = auto()
    INC = auto()
    DEC = auto()
    XCHG = auto()
    AND = auto()
    OR = auto()
    XOR = auto()
    NOT = auto()
    NEG = auto()
    SHL = auto()
    SHR = auto()
    CMP = auto()
    TEST = auto()
    NOP = auto()
    LEAVE = auto()
    RET = auto()
    RET_IMM = auto()
    CALL_REL = auto()
    CALL_RM = auto()
    CALL_GS = auto()
    JMP_REL = auto()
    JMP_RM = auto()
    JCC = auto()
    SYSCALL = auto()
    SYSENTER = auto()
    INT = auto()


_MNEMONIC_TEXT = {
    Mnemonic.MOV: "mov", Mnemonic.LEA: "lea", Mnemonic.ADD: "add",
    Mnemonic.SUB: "sub", Mnemonic.IMUL: "imul", Mnemonic.IDIV: "idiv",
    Mnemonic.POP: "pop", Mnemonic.PUSH: "push", Mnemonic.INC: "inc",
    Mnemonic.DEC: "dec", Mnemonic.XCHG: "xchg", Mnemonic.AND: "and",
    Mnemonic.OR: "or", Mnemonic.XOR: "xor", Mnemonic.NOT: "not",
    Mnemonic.NEG: "neg", Mnemonic.SHL: "shl", Mnemonic.SHR: "shr",
    Mnemonic.CMP: "cmp", Mnemonic.TEST: "test", Mnemonic.NOP: "nop",
    Mnemonic.LEAVE: "leave", Mnemonic.RET: "ret", Mnemonic.RET_IMM: "ret",
    Mnemonic.CALL_REL: "call", Mnemonic.CALL_RM: "call",
    Mnemonic.CALL_GS: "call", Mnemonic.JMP_REL: "jmp", Mnemonic.JMP_RM: "jmp",
    Mnemonic.JCC: "jcc", Mnemonic.SYSCALL: "syscall",
    Mnemonic.SYSENTER: "sysenter", Mnemonic.INT: "int",
}

_CC_NAMES = [
    "jo", "jno", "jb", "jae", "je", "jne", "jbe", "ja",
    "js", "jns", "jp", "jnp", "jl", "jge", "jle", "jg",
]

# Instructions after which straight-line execution cannot continue.
_TERMINATORS = frozenset(
    {
        Mnemonic.RET,
        Mnemonic.RET_IMM,
        Mnemonic.JMP_REL,
        Mnemonic.JMP_RM,
        Mnemonic.SYSCALL,
        Mnemonic.SYSENTER,
        Mnemonic.INT,
    }
)


class MemAccess(Enum):
    NONE = auto()
    LOAD = auto()
    STORE = auto()


@dataclass(frozen=True)
class MemRef:
    """A decoded memory addressing expression."""

    base: Reg | None = None
    index: Reg | None = None
    scale: int = 1
    disp: int = 0
    rip_relative: bool = False

    def regs(self) -> frozenset[Reg]:
        out = set()
        if self.base is not None:
            out.add(self.base)
        if self.index is not None:
            out.add(self.index)
        return frozenset(out)

    @property
    def is_bare(self) -> bool:
        """A single-register expression with no displacement, index, or rip base."""
        return (
            self.base is not None
            and self.index is None
            and self.disp == 0
            and not self.rip_relative
        )

    def render(self) -> str:
        if self.rip_relative:
            inner = "rip"
        elif self.base is not None:
            inner = _NAME64[self.base]
        else:
            inner = ""
        if self.index is not None:
            part = _NAME64[self.index] if self.scale == 1 else f"{_NAME64[self.index]}*{self.scale}"
            inner = f"{inner}+{part}" if inner else part
        if self.disp or not inner:
            sign = "+" if self.disp >= 0 else "-"
            inner = f"{inner}{sign}{abs(self.disp):#x}" if inner else f"{self.disp:#x}"
        return f"[{inner}]"


@dataclass(frozen=True)
class Operand:
    kind: str  # "reg" | "imm" | "mem"
    reg: Reg | None = None
    width: int = 64
    high8: bool = False
    imm: int | None = None
    mem: MemRef | None = None

    @staticmethod
    def make_reg(reg: Reg, width: int = 64, high8: bool = False) -> Operand:
        return Operand(kind="reg", reg=reg, width=width, high8=high8)

    @staticmethod
    def make_imm(value: int, width: int = 64) -> Operand:
        return Operand(kind="imm", imm=value, width=width)

    @staticmethod
    def make_mem(mem: MemRef, width: int = 64) -> Operand:
        return Operand(kind="mem", mem=mem, width=width)

    @property
    def is_reg(self) -> bool:
        return self.kind == "reg"

    @property
    def is_imm(self) -> bool:
        return self.kind == "imm"

    @property
    def is_mem(self) -> bool:
        return self.kind == "mem"

    def render(self) -> str:
        if self.is_reg:
            assert self.reg is not None
            return reg_name(self.reg, self.width, self.high8)
        if self.is_imm:
            assert self.imm is not None
            return f"{self.imm:#x}" if self.imm >= 0 else f"-{-self.imm:#x}"
        assert self.mem is not None
        return self.mem.render()


@dataclass(frozen=True)
class Instruction:
    addr: int
    length: int
    mnemonic: Mnemonic
    operands: tuple[Operand, ...]
    reads: frozenset[Reg]
    writes: frozenset[Reg]
    mem_access: MemAccess
    raw: bytes
    branch_target: int | None = None
    cc: int | None = None

    @property
    def end(self) -> int:
        return self.addr + self.length

    @property
    def is_terminator(self) -> bool:
        return self.mnemonic in _TERMINATORS

    def render(self) -> str:
        if self.mnemonic is Mnemonic.JCC:
            text = _CC_NAMES[self.cc or 0]
        else:
            text = _MNEMONIC_TEXT[self.mnemonic]
        if self.mnemonic is Mnemonic.CALL_GS:
            return f"call gs:{self.operands[0].mem.render()}"
        if self.branch_target is not None:
            return f"{text} {self.branch_target:#x}"
        if not self.operands:
            return text
        # Annotate pure-memory destinations with a width so stores read unambiguously.
        parts = []
        for op in self.operands:
            if op.is_mem and all(o.kind != "reg" for o in self.operands):
                size = {8: "byte", 16: "word", 32: "dword", 64: "qword"}[op.width]
                parts.append(f"{size} {op.render()}")
            else:
                parts.append(op.render())
        return f"{text} " + ", ".join(parts)


GS_CALL_BYTES = bytes([0x65, 0xFF, 0x15, 0x10, 0x00, 0x00, 0x00])

_GROUP_RM_R = {
    0x01: Mnemonic.ADD, 0x09: Mnemonic.OR, 0x21: Mnemonic.AND,
    0x29: Mnemonic.SUB, 0x31: Mnemonic.XOR, 0x39: Mnemonic.CMP,
    0x89: Mnemonic.MOV, 0x85: Mnemonic.TEST, 0x87: Mnemonic.XCHG,
}
_GROUP_R_RM = {
    0x03: Mnemonic.ADD, 0x0B: Mnemonic.OR, 0x23: Mnemonic.AND,
    0x2B: Mnemonic.SUB, 0x33: Mnemonic.XOR, 0x3B: Mnemonic.CMP,
    0x8B: Mnemonic.MOV,
}
_GROUP1_DIGIT = {
    0: Mnemonic.ADD, 1: Mnemonic.OR, 4: Mnemonic.AND,
    5: Mnemonic.SUB, 6: Mnemonic.XOR, 7: Mnemonic.CMP,
}
_SHIFT_DIGIT = {4: Mnemonic.SHL, 5: Mnemonic.SHR}

# Mnemonics whose destination register value is also an input.
_READS_DEST = frozenset(
    {
        Mnemonic.ADD, Mnemonic.OR, Mnemonic.AND, Mnemonic.SUB, Mnemonic.XOR,
        Mnemonic.CMP, Mnemonic.TEST, Mnemonic.IMUL, Mnemonic.INC, Mnemonic.DEC,
        Mnemonic.NOT, Mnemonic.NEG, Mnemonic.SHL, Mnemonic.SHR,
    }
)
# Comparison mnemonics update flags only, never a register or memory cell.
_NO_RESULT = frozenset({Mnemonic.CMP, Mnemonic.TEST})


def _s8(value: int) -> int:
    return value - 0x100 if value >= 0x80 else value


def _s32(value: int) -> int:
    return value - 0x100000000 if value >= 0x80000000 else value


class _Cursor:
    """Byte reader over the decode window; raises IndexError past the end."""

    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def u8(self) -> int:
        value = self.data[self.pos]
        self.pos += 1
        return value

    def u16(self) -> int:
        value = struct.unpack_from("<H", self.data, self.pos)[0]
        self.pos += 2
        return value

    def u32(self) -> int:
        if self.pos + 4 > len(self.data):
            raise IndexError
        value = struct.unpack_from("<I", self.data, self.pos)[0]
        self.pos += 4
        return value

    def u64(self) -> int:
        if self.pos + 8 > len(self.data):
            raise IndexError
        value = struct.unpack_from("<Q", self.data, self.pos)[0]
        self.pos += 8
        return value


def _reg_op(index: int, width: int, rex_present: bool) -> Operand:
    if width == 8 and not rex_present and 4 <= index <= 7:
        return Operand.make_reg(Reg(index - 4), 8, high8=True)
    return Operand.make_reg(Reg(index), width)


def _parse_modrm(
    cur: _Cursor, rex: int, width: int
) -> tuple[Operand, int]:
    """Parse ModRM (and SIB/displacement). Returns (r/m operand, reg field)."""
    modrm = cur.u8()
    mod = modrm >> 6
    reg = ((modrm >> 3) & 7) | ((rex & 0x4) << 1)
    rm = modrm & 7
    if mod == 3:
        return _reg_op(rm | ((rex & 1) << 3), width, rex != 0), reg

    base: Reg | None = None
    index: Reg | None = None
    scale = 1
    disp = 0
    rip = False
    if rm == 4:
        sib = cur.u8()
        scale = 1 << (sib >> 6)
        index_bits = ((sib >> 3) & 7) | ((rex & 0x2) << 2)
        if index_bits != 4:
            index = Reg(index_bits)
        base_bits = sib & 7
        if base_bits == 5 and mod == 0:
            disp = _s32(cur.u32())
        else:
            base = Reg(base_bits | ((rex & 1) << 3))
    elif rm == 5 and mod == 0:
        rip = True
        disp = _s32(cur.u32())
    else:
        base = Reg(rm | ((rex & 1) << 3))

    if mod == 1:
        disp = _s8(cur.u8())
    elif mod == 2:
        disp = _s32(cur.u32())
    mem = MemRef(base=base, index=index, scale=scale, disp=disp, rip_relative=rip)
    return Operand.make_mem(mem, width), reg


def _binary_effects(
    mnemonic: Mnemonic, dst: Operand, src: Operand
) -> tuple[frozenset[Reg], frozenset[Reg], MemAccess]:
    reads: set[Reg] = set()
    writes: set[Reg] = set()
    access = MemAccess.NONE
    reads_dest = mnemonic in _READS_DEST
    no_result = mnemonic in _NO_RESULT

    if src.is_reg:
        reads.add(src.reg)
    elif src.is_mem:
        reads |= src.mem.regs()
        access = MemAccess.LOAD

    if dst.is_reg:
        if reads_dest:
            reads.add(dst.reg)
        if not no_result:
            writes.add(dst.reg)
    elif dst.is_mem:
        reads |= dst.mem.regs()
        access = MemAccess.LOAD if no_result else MemAccess.STORE

    if mnemonic is Mnemonic.XCHG:
        for op in (dst, src):
            if op.is_reg:
                reads.add(op.reg)
                writes.add(op.reg)
    return frozenset(reads), frozenset(writes), access


def decode(data: bytes, addr: int) -> Instruction | None:
    """Decode one instruction at addr from data. Returns None for anything
    outside the supported subset; the invalid marker always consumes 1 byte."""
    if not data:
        return None
    if data[:7] == GS_CALL_BYTES:
        mem = Operand.make_mem(MemRef(disp=0x10), 64)
        return Instruction(
            addr=addr, length=7, mnemonic=Mnemonic.CALL_GS, operands=(mem,),
            reads=frozenset({Reg.RSP}), writes=frozenset({Reg.RSP}),
            mem_access=MemAccess.STORE, raw=bytes(data[:7]),
        )

    cur = _Cursor(data)
    try:
        return _decode_body(cur, addr, data)
    except (IndexError, struct.error):
        return None


def _decode_body(cur: _Cursor, addr: int, data: bytes) -> Instruction | None:
    rex = 0
    op = cur.u8()
    if 0x40 <= op <= 0x4F:
        rex = op
        op = cur.u8()
    width = 64 if rex & 0x8 else 32

    def fin(
        mnemonic: Mnemonic,
        operands: tuple[Operand, ...] = (),
        reads: Iterable[Reg] = (),
        writes: Iterable[Reg] = (),
        access: MemAccess = MemAccess.NONE,
        branch_target: int | None = None,
        cc: int | None = None,
    ) -> Instruction:
        length = cur.pos
        return Instruction(
            addr=addr, length=length, mnemonic=mnemonic, operands=operands,
            reads=frozenset(reads), writes=frozenset(writes), mem_access=access,
            raw=bytes(data[:length]), branch_target=branch_target, cc=cc,
        )

    def fin_binary(mnemonic: Mnemonic, dst: Operand, src: Operand) -> Instruction:
        reads, writes, access = _binary_effects(mnemonic, dst, src)
        return fin(mnemonic, (dst, src), reads, writes, access)

    # Two-byte opcodes.
    if op == 0x0F:
        op2 = cur.u8()
        if op2 == 0x05:
            return fin(
                Mnemonic.SYSCALL, (), {Reg.RAX}, {Reg.RAX, Reg.RCX, Reg.R11}
            )
        if op2 == 0x34:
            return fin(Mnemonic.SYSENTER, (), {Reg.RAX}, {Reg.RAX})
        if 0x80 <= op2 <= 0x8F:
            disp = _s32(cur.u32())
            target = (addr + cur.pos + disp) & MASK64
            return fin(Mnemonic.JCC, (), branch_target=target, cc=op2 - 0x80)
        if op2 == 0xAF:
            rm, reg_bits = _parse_modrm(cur, rex, width)
            dst = _reg_op(reg_bits, width, rex != 0)
            return fin_binary(Mnemonic.IMUL, dst, rm)
        return None

    # Register-to-r/m and r/m-to-register families.
    if op in _GROUP_RM_R or op in (0x88, 0x85, 0x87):
        if op == 0x88:
            mnemonic, w = Mnemonic.MOV, 8
        else:
            mnemonic, w = _GROUP_RM_R[op], width
        rm, reg_bits = _parse_modrm(cur, rex, w)
        src = _reg_op(reg_bits, w, rex != 0)
        return fin_binary(mnemonic, rm, src)
    if op in _GROUP_R_RM or op == 0x8A:
        if op == 0x8A:
            mnemonic, w = Mnemonic.MOV, 8
        else:
            mnemonic, w = _GROUP_R_RM[op], width
        rm, reg_bits = _parse_modrm(cur, rex, w)
        dst = _reg_op(reg_bits, w, rex != 0)
        return fin_binary(mnemonic, dst, rm)

    if 0x50 <= op <= 0x57:
        reg = Reg((op & 7) | ((rex & 1) << 3))
        return fin(
            Mnemonic.PUSH, (Operand.make_reg(reg),), {reg, Reg.RSP}, {Reg.RSP},
            MemAccess.STORE,
        )
    if 0x58 <= op <= 0x5F:
        reg = Reg((op & 7) | ((rex & 1) << 3))
        return fin(
            Mnemonic.POP, (Operand.make_reg(reg),), {Reg.RSP}, {reg, Reg.RSP},
            MemAccess.LOAD,
        )

    if 0x70 <= op <= 0x7F:
        disp = _s8(cur.u8())
        target = (addr + cur.pos + disp) & MASK64
        return fin(Mnemonic.JCC, (), branch_target=target, cc=op - 0x70)

    if op in (0x81, 0x83):
        rm, digit = _parse_modrm(cur, rex, width)
        mnemonic = _GROUP1_DIGIT.get(digit)
        if mnemonic is None:
            return None
        imm = _s8(cur.u8()) if op == 0x83 else _s32(cur.u32())
        return fin_binary(mnemonic, rm, Operand.make_imm(imm, width))

    if op == 0x8D:
        rm, reg_bits = _parse_modrm(cur, rex, width)
        if not rm.is_mem:
            return None
        dst = _reg_op(reg_bits, width, rex != 0)
        return fin(
            Mnemonic.LEA, (dst, rm), rm.mem.regs(), {dst.reg}, MemAccess.NONE
        )

    if 0x90 <= op <= 0x97:
        other = (op & 7) | ((rex & 1) << 3)
        if other == 0:
            return fin(Mnemonic.NOP)
        a = Operand.make_reg(Reg.RAX, width)
        b = _reg_op(other, width, rex != 0)
        return fin(
            Mnemonic.XCHG, (a, b), {a.reg, b.reg}, {a.reg, b.reg}, MemAccess.NONE
        )

    if 0xB8 <= op <= 0xBF:
        reg = Reg((op & 7) | ((rex & 1) << 3))
        imm = cur.u64() if rex & 0x8 else cur.u32()
        return fin(
            Mnemonic.MOV,
            (Operand.make_reg(reg, width), Operand.make_imm(imm, width)),
            (), {reg},
        )

    if op in (0xC1, 0xD3):
        rm, digit = _parse_modrm(cur, rex, width)
        mnemonic = _SHIFT_DIGIT.get(digit)
        if mnemonic is None:
            return None
        if op == 0xC1:
            src = Operand.make_imm(cur.u8(), 8)
        else:
            src = Operand.make_reg(Reg.RCX, 8)
        insn = fin_binary(mnemonic, rm, src)
        return insn

    if op == 0xC2:
        imm = cur.u16()
        return fin(
            Mnemonic.RET_IMM, (Operand.make_imm(imm, 16),), {Reg.RSP}, {Reg.RSP},
            MemAccess.LOAD,
        )
    if op == 0xC3:
        return fin(Mnemonic.RET, (), {Reg.RSP}, {Reg.RSP}, MemAccess.LOAD)

    if op == 0xC7:
        rm, digit = _parse_modrm(cur, rex, width)
        if digit != 0:
            return None
        imm = _s32(cur.u32())
        return fin_binary(Mnemonic.MOV, rm, Operand.make_imm(imm, width))

    if op == 0xC9:
        return fin(
            Mnemonic.LEAVE, (), {Reg.RBP, Reg.RSP}, {Reg.RBP, Reg.RSP},
            MemAccess.LOAD,
        )

    if op == 0xCD:
        imm = cur.u8()
        return fin(
            Mnemonic.INT, (Operand.make_imm(imm, 8),), {Reg.RAX}, {Reg.RAX}
        )

    if op == 0xE8:
        disp = _s32(cur.u32())
        target = (addr + cur.pos + disp) & MASK64
        return fin(
            Mnemonic.CALL_REL, (), {Reg.RSP}, {Reg.RSP}, MemAccess.STORE,
            branch_target=target,
        )
    if op == 0xE9:
        disp = _s32(cur.u32())
        return fin(
            Mnemonic.JMP_REL, (), branch_target=(addr + cur.pos + disp) & MASK64
        )
    if op == 0xEB:
        disp = _s8(cur.u8())
        return fin(
            Mnemonic.JMP_REL, (), branch_target=(addr + cur.pos + disp) & MASK64
        )

    if op == 0xF7:
        rm, digit = _parse_modrm(cur, rex, width)
        if digit == 2:
            mnemonic = Mnemonic.NOT
        elif digit == 3:
            mnemonic = Mnemonic.NEG
        else:
            return None
        if rm.is_reg:
            return fin(mnemonic, (rm,), {rm.reg}, {rm.reg})
        return fin(mnemonic, (rm,), rm.mem.regs(), (), MemAccess.STORE)

    if op == 0xFF:
        rm, digit = _parse_modrm(cur, rex, width)
        if digit in (0, 1):
            mnemonic = Mnemonic.INC if digit == 0 else Mnemonic.DEC
            if rm.is_reg:
                return fin(mnemonic, (rm,), {rm.reg}, {rm.reg})
            return fin(mnemonic, (rm,), rm.mem.regs(), (), MemAccess.STORE)
        if digit == 2:
            # Indirect call: operand size is fixed at 64 bits in long mode.
            rm64 = _widen(rm)
            reads = {Reg.RSP} | _operand_reads(rm64)
            return fin(
                Mnemonic.CALL_RM, (rm64,), reads, {Reg.RSP}, MemAccess.STORE
            )
        if digit == 4:
            rm64 = _widen(rm)
            access = MemAccess.LOAD if rm64.is_mem else MemAccess.NONE
            return fin(Mnemonic.JMP_RM, (rm64,), _operand_reads(rm64), (), access)
        return None

    return None


def _widen(op: Operand) -> Operand:
    if op.is_reg:
        return Operand.make_reg(op.reg, 64, op.high8)
    return Operand.make_mem(op.mem, 64)


def _operand_reads(op: Operand) -> set[Reg]:
    if op.is_reg:
        return {op.reg}
    if op.is_mem:
        return set(op.mem.regs())
    return set()


class PageDisasm:
    """Incremental recursive-traversal disassembly state for one page.

    Byte ranges of accepted instructions are claimed; a later path that runs
    into claimed bytes at a non-instruction boundary stops there, so whichever
    entry was processed first keeps its stream. Entries are processed in
    ascending address order within each batch.
    """

    def __init__(self, page: PageRecord):
        if not page.perms.executable:
            raise ValueError(f"page {page.base:#x} is not executable")
        self.page = page
        self.insns: dict[int, Instruction] = {}
        self.entries: set[int] = set()
        self._claimed = bytearray(PAGE_SIZE)

    def add_entries(self, entries: Iterable[int]) -> int:
        """Extend the stream from new entry addresses; returns instructions added."""
        fresh = sorted(set(entries) - self.entries)
        for entry in fresh:
            if not self.page.contains(entry):
                raise ValueError(
                    f"entry {entry:#x} outside page {self.page.base:#x}"
                )
        self.entries.update(fresh)
        work = deque(fresh)
        added = 0
        while work:
            addr = work.popleft()
            while True:
                if addr in self.insns:
                    break
                offset = addr - self.page.base
                if not 0 <= offset < PAGE_SIZE or self._claimed[offset]:
                    break
                insn = decode(self.page.data[offset:], addr)
                if insn is None:
                    break
                end = offset + insn.length
                if any(self._claimed[offset:end]):
                    break
                for i in range(offset, end):
                    self._claimed[i] = 1
                self.insns[addr] = insn
                added += 1
                target = insn.branch_target
                if target is not None and self.page.contains(target):
                    t_off = target - self.page.base
                    if target not in self.insns and not self._claimed[t_off]:
                        work.append(target)
                if insn.is_terminator:
                    break
                addr = insn.end
        return added

    def instructions(self) -> tuple[Instruction, ...]:
        return tuple(self.insns[a] for a in sorted(self.insns))


def disassemble_page(
    page: PageRecord, entries: Iterable[int]
) -> tuple[Instruction, ...]:
    """Recursive-traversal disassembly of one page from the given entry points.

    Paths stop at terminators, invalid bytes, claimed bytes, and the page end.
    Direct branch targets inside the page are followed; the returned stream is
    deduplicated and sorted by address.
    """
    state = PageDisasm(page)
    state.add_entries(entries)
    return state.instructions()


def extract_chain_targets(
    insns: Iterable[Instruction],
    image: MemoryImage,
    include_cond: bool = True,
) -> frozenset[int]:
    """Collect code addresses an instruction stream points at.

    Direct call/jmp targets always count, conditional-branch targets count
    unless disabled, and rip-relative indirect call/jmp sites contribute the
    pointed-to word when the slot is mapped readable and the pointee lands in
    an executable page.
    """
    targets: set[int] = set()
    for insn in insns:
        if insn.mnemonic in (Mnemonic.CALL_REL, Mnemonic.JMP_REL):
            targets.add(insn.branch_target)
        elif insn.mnemonic is Mnemonic.JCC and include_cond:
            targets.add(insn.branch_target)
        elif insn.mnemonic in (Mnemonic.CALL_RM, Mnemonic.JMP_RM):
            op = insn.operands[0]
            if not (op.is_mem and op.mem.rip_relative):
                continue
            slot = (insn.end + op.mem.disp) & MASK64
            try:
                page = image.page_at(slot)
                if not page.perms.readable:
                    continue
                value = image.read_u64(slot)
            except UnmappedRead:
                continue
            if image.is_executable(value):
                targets.add(value)
    return frozenset(targets)
