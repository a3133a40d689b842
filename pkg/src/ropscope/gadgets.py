"""Gadget mining and classification over legitimate instruction streams.

Gadgets are backward windows ending at a terminator: a return, an indirect
branch, or a system-entry instruction. Only byte-adjacent instructions from
the decoded stream form windows, never overlapping misaligned decodes.
Each gadget carries a set of type labels and, per type, whether it appears
in minimal form (core plus terminator, simple addressing, no side effects)
or extended form.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from ropscope.disasm import (
    GS_CALL_BYTES,
    Instruction,
    Mnemonic,
    Operand,
    Reg,
)


class GadgetType(str, Enum):
    MR = "MR"
    LR = "LR"
    AM = "AM"
    LM = "LM"
    AM_LD = "AM-LD"
    SM = "SM"
    AM_ST = "AM-ST"
    LOGIC = "LOGIC"
    SP = "SP"
    JMP = "JMP"
    CALL = "CALL"
    SYS = "SYS"
    CP = "CP"
    CS1 = "CS1"
    FS = "FS"
    TM = "TM"
    RF = "RF"
    CS2 = "CS2"
    EP = "EP"
    BROP = "BROP"
    STOP = "STOP"
    # Refined store/load shapes used by the narrower built-in sets.
    ST = "ST"
    STCONSTEX = "STCONSTEX"
    STCONST = "STCONST"
    LMEX = "LMEX"

    def __str__(self) -> str:  # pragma: no cover - trivial
        return self.value


class Footprint(Enum):
    MIN_FP = "MIN"
    EX_FP = "EX"


# The expressiveness core: types that together give load, store, move,
# arithmetic, logic, control transfer, and system-call primitives.
TC_TYPES: frozenset[GadgetType] = frozenset(
    {
        GadgetType.LM, GadgetType.SM, GadgetType.LR, GadgetType.MR,
        GadgetType.AM, GadgetType.AM_LD, GadgetType.AM_ST, GadgetType.LOGIC,
        GadgetType.JMP, GadgetType.CALL, GadgetType.SYS,
    }
)

# Operation categories used by scheme-comparison reports.
TC_CATEGORIES: dict[str, tuple[GadgetType, ...]] = {
    "memory": (GadgetType.LM, GadgetType.SM),
    "assignment": (GadgetType.LR, GadgetType.MR),
    "arithmetic": (GadgetType.AM, GadgetType.AM_LD, GadgetType.AM_ST),
    "logical": (GadgetType.LOGIC,),
    "control_flow": (GadgetType.JMP,),
    "function_call": (GadgetType.CALL,),
    "system_call": (GadgetType.SYS,),
}

# Structurally fuzzy types; matched only when explicitly enabled and always
# excluded from the built-in set specs.
HEURISTIC_TYPES: frozenset[GadgetType] = frozenset(
    {GadgetType.CS1, GadgetType.FS, GadgetType.TM}
)

_ARITH = frozenset({Mnemonic.ADD, Mnemonic.SUB, Mnemonic.IMUL})
_LOGICAL = frozenset(
    {Mnemonic.AND, Mnemonic.OR, Mnemonic.XOR, Mnemonic.SHL, Mnemonic.SHR}
)
_RET_CLASS = frozenset({Mnemonic.RET, Mnemonic.RET_IMM})
_SYS_CORES = frozenset(
    {Mnemonic.SYSCALL, Mnemonic.SYSENTER, Mnemonic.CALL_GS}
)
_BROP_REGS = (
    Reg.RBX, Reg.RBP, Reg.R12, Reg.R13, Reg.R14, Reg.RSI, Reg.R15, Reg.RDI,
)


def _is_sys_core(insn: Instruction) -> bool:
    if insn.mnemonic in _SYS_CORES:
        return True
    return (
        insn.mnemonic is Mnemonic.INT
        and insn.operands
        and insn.operands[0].imm == 0x80
    )


def _is_gadget_terminator(insn: Instruction) -> bool:
    return (
        insn.mnemonic in _RET_CLASS
        or insn.mnemonic in (Mnemonic.JMP_RM, Mnemonic.CALL_RM)
        or _is_sys_core(insn)
    )


def _is_store_mov(insn: Instruction) -> bool:
    return (
        insn.mnemonic is Mnemonic.MOV
        and len(insn.operands) == 2
        and insn.operands[0].is_mem
        and insn.operands[1].is_reg
    )


@dataclass(frozen=True)
class Gadget:
    """A classified instruction window ending at a terminator."""

    addr: int
    insns: tuple[Instruction, ...]
    types: frozenset[GadgetType]
    footprints: Mapping[GadgetType, Footprint]
    core_index: Mapping[GadgetType, int]

    @property
    def length(self) -> int:
        return len(self.insns)

    @property
    def end(self) -> int:
        return self.insns[-1].end

    @property
    def raw(self) -> bytes:
        return b"".join(i.raw for i in self.insns)

    @property
    def terminator(self) -> Instruction:
        return self.insns[-1]

    def footprint(self, gtype: GadgetType) -> Footprint | None:
        return self.footprints.get(gtype)

    def render(self) -> str:
        return "; ".join(i.render() for i in self.insns)


@dataclass(frozen=True)
class MiningOptions:
    max_len: int = 5
    enable_heuristic_types: bool = False


# Per-instruction core matching. Each hit names a type and whether the match
# is in the type's minimal shape (register operands or a bare [reg] address).


def _mem_of(op: Operand):
    return op.mem


def _insn_cores(insn: Instruction) -> list[tuple[GadgetType, bool]]:
    hits: list[tuple[GadgetType, bool]] = []
    m = insn.mnemonic
    ops = insn.operands

    if m is Mnemonic.MOV and len(ops) == 2:
        dst, src = ops
        if dst.is_reg and dst.reg is Reg.RSP:
            hits.append((GadgetType.SP, src.is_reg))
        elif dst.is_reg and (src.is_reg or src.is_imm):
            hits.append((GadgetType.MR, True))
        elif dst.is_reg and src.is_mem:
            mem = _mem_of(src)
            hits.append((GadgetType.LM, mem.is_bare))
            if mem.base is not None and mem.index is None and mem.disp != 0:
                hits.append((GadgetType.LMEX, True))
        elif dst.is_mem and src.is_reg:
            mem = _mem_of(dst)
            hits.append((GadgetType.SM, mem.is_bare))
            hits.append((GadgetType.ST, mem.is_bare))
            if mem.base is not None and mem.index is None and mem.disp != 0:
                hits.append((GadgetType.STCONSTEX, True))
        elif dst.is_mem and src.is_imm:
            mem = _mem_of(dst)
            hits.append((GadgetType.STCONST, mem.is_bare))
            if mem.base is not None and mem.index is None and mem.disp != 0:
                hits.append((GadgetType.STCONSTEX, True))

    elif m in _ARITH and len(ops) == 2:
        dst, src = ops
        if dst.is_reg and dst.reg is Reg.RSP:
            hits.append((GadgetType.SP, src.is_reg))
        elif dst.is_reg and (src.is_reg or src.is_imm):
            hits.append((GadgetType.AM, True))
        elif dst.is_reg and src.is_mem:
            hits.append((GadgetType.AM_LD, _mem_of(src).is_bare))
        elif dst.is_mem and src.is_reg:
            hits.append((GadgetType.AM_ST, _mem_of(dst).is_bare))

    elif m in _LOGICAL and len(ops) == 2:
        dst, src = ops
        if dst.is_reg and dst.reg is Reg.RSP:
            hits.append((GadgetType.SP, src.is_reg))
        elif dst.is_reg:
            hits.append((GadgetType.LOGIC, True))
        elif dst.is_mem:
            hits.append((GadgetType.LOGIC, _mem_of(dst).is_bare))

    elif m is Mnemonic.POP and ops:
        reg = ops[0].reg
        if reg is Reg.RSP:
            hits.append((GadgetType.SP, True))
        else:
            hits.append((GadgetType.LR, True))

    elif m is Mnemonic.XCHG and len(ops) == 2:
        regs = {o.reg for o in ops if o.is_reg}
        if Reg.RSP in regs and len(regs) == 2:
            hits.append((GadgetType.SP, True))

    elif m is Mnemonic.LEA and ops and ops[0].reg is Reg.RSP:
        hits.append((GadgetType.SP, False))

    elif m is Mnemonic.JMP_RM:
        hits.append((GadgetType.JMP, ops[0].is_reg))

    elif m is Mnemonic.CALL_RM:
        op = ops[0]
        bare = op.is_reg or (op.is_mem and op.mem.is_bare)
        hits.append((GadgetType.CALL, bare))

    elif m is Mnemonic.CALL_GS:
        hits.append((GadgetType.SYS, True))
        hits.append((GadgetType.CALL, False))

    elif _is_sys_core(insn):
        hits.append((GadgetType.SYS, True))

    return hits


_RET_TERMINATED_TYPES = frozenset(
    {
        GadgetType.MR, GadgetType.LR, GadgetType.AM, GadgetType.LM,
        GadgetType.AM_LD, GadgetType.SM, GadgetType.AM_ST, GadgetType.LOGIC,
        GadgetType.ST, GadgetType.STCONST,
        GadgetType.STCONSTEX, GadgetType.LMEX,
    }
)


@dataclass(frozen=True)
class Classification:
    types: frozenset[GadgetType]
    footprints: Mapping[GadgetType, Footprint]
    core_index: Mapping[GadgetType, int]


def classify(
    insns: Sequence[Instruction], enable_heuristic_types: bool = False
) -> Classification:
    """Assign type labels to an instruction window.

    Classification is position-pure: it depends only on mnemonics, operands,
    and branch offsets relative to the window, never on absolute addresses.
    """
    assert insns, "cannot classify an empty window"
    last = insns[-1]
    n = len(insns)
    footprints: dict[GadgetType, Footprint] = {}
    cores: dict[GadgetType, int] = {}

    ret_end = last.mnemonic in _RET_CLASS

    # Single-instruction core matches; the match closest to the terminator
    # wins the core slot for its type.
    per_insn: dict[GadgetType, tuple[int, bool]] = {}
    for idx, insn in enumerate(insns):
        for gtype, strict in _insn_cores(insn):
            per_insn[gtype] = (idx, strict)

    for gtype, (idx, strict) in per_insn.items():
        if gtype in _RET_TERMINATED_TYPES:
            if not ret_end or idx == n - 1:
                continue
            minimal = strict and n == 2 and idx == 0
        elif gtype is GadgetType.SP:
            # A pivot redirects control through the new stack by itself, so
            # its minimum footprint has no closing return.
            if idx == n - 1:
                minimal = strict and n == 1
            elif ret_end:
                minimal = strict and n == 2 and idx == 0
            else:
                continue
        elif gtype is GadgetType.JMP:
            if idx != n - 1:
                continue
            minimal = strict and n == 1
        elif gtype is GadgetType.CALL:
            if idx != n - 1:
                continue
            minimal = strict and n == 1
        elif gtype is GadgetType.SYS:
            if idx == n - 1:
                minimal = n == 1
            elif idx == 0 and n == 2 and ret_end:
                minimal = True
            elif ret_end:
                minimal = False
            else:
                continue
        else:
            continue
        cores[gtype] = idx
        footprints[gtype] = Footprint.MIN_FP if minimal else Footprint.EX_FP

    # Sequence-shaped types.
    if last.mnemonic is Mnemonic.CALL_RM and n >= 2 and _is_store_mov(insns[-2]):
        strict = (
            n == 2
            and insns[-2].operands[0].mem.is_bare
            and last.operands[0].is_reg
        )
        cores[GadgetType.CP] = n - 2
        footprints[GadgetType.CP] = (
            Footprint.MIN_FP if strict else Footprint.EX_FP
        )

    if ret_end:
        call_sites = [
            i for i in range(n - 1) if insns[i].mnemonic is Mnemonic.CALL_RM
        ]
        if call_sites:
            cores[GadgetType.CS2] = call_sites[-1]
            footprints[GadgetType.CS2] = (
                Footprint.MIN_FP if n == 2 else Footprint.EX_FP
            )

    if last.mnemonic in (Mnemonic.CALL_RM, Mnemonic.JMP_RM):
        pops = [
            i
            for i in range(n - 1)
            if insns[i].mnemonic is Mnemonic.POP
            and insns[i].operands[0].reg is Reg.RBP
        ]
        if pops:
            cores[GadgetType.EP] = pops[-1]
            footprints[GadgetType.EP] = (
                Footprint.MIN_FP if n == 2 else Footprint.EX_FP
            )

    if last.mnemonic is Mnemonic.JMP_RM:
        for i in range(1, n - 1):
            if insns[i].mnemonic is Mnemonic.CALL_RM and _is_store_mov(
                insns[i - 1]
            ):
                cores[GadgetType.RF] = i - 1
                footprints[GadgetType.RF] = (
                    Footprint.MIN_FP if n == 3 else Footprint.EX_FP
                )
                break

    if (
        n == 9
        and ret_end
        and all(
            insns[i].mnemonic is Mnemonic.POP
            and insns[i].operands[0].reg is _BROP_REGS[i]
            for i in range(8)
        )
    ):
        cores[GadgetType.BROP] = 7
        footprints[GadgetType.BROP] = Footprint.MIN_FP

    if (
        last.mnemonic is Mnemonic.JMP_REL
        and last.branch_target is not None
        and insns[0].addr <= last.branch_target <= last.addr
    ):
        cores[GadgetType.STOP] = n - 1
        footprints[GadgetType.STOP] = (
            Footprint.MIN_FP if n <= 2 else Footprint.EX_FP
        )

    if enable_heuristic_types:
        if n >= 20:
            cores[GadgetType.TM] = n - 1
            footprints[GadgetType.TM] = Footprint.EX_FP
        backward_jcc = [
            i
            for i in range(n)
            if insns[i].mnemonic is Mnemonic.JCC
            and insns[i].branch_target is not None
            and insns[0].addr <= insns[i].branch_target <= insns[i].addr
        ]
        if backward_jcc and ret_end:
            cores[GadgetType.CS1] = backward_jcc[-1]
            footprints[GadgetType.CS1] = Footprint.EX_FP
        if (
            ret_end
            and n >= 2
            and insns[0].mnemonic in (Mnemonic.CALL_REL, Mnemonic.CALL_RM)
        ):
            cores[GadgetType.FS] = 0
            footprints[GadgetType.FS] = Footprint.EX_FP

    return Classification(
        types=frozenset(cores), footprints=footprints, core_index=cores
    )


_SYS_SCAN_PATTERNS = (
    bytes([0x0F, 0x05]),
    bytes([0x0F, 0x34]),
    bytes([0xCD, 0x80]),
    GS_CALL_BYTES,
)


def locate_sys_anchors(insns: Sequence[Instruction]) -> list[int]:
    """Scan raw stream bytes for system-entry opcode strings, keeping only
    hits aligned to a legitimate instruction of the same kind. Misaligned
    occurrences (immediates, displacements) are rejected."""
    by_addr = {i.addr: i for i in insns}
    anchors: list[int] = []
    # Work over maximal byte-adjacent runs so patterns inside one instruction
    # but spanning into the next are still visible to the scan.
    runs: list[tuple[int, bytes]] = []
    current_start: int | None = None
    current = b""
    prev_end: int | None = None
    for insn in insns:
        if prev_end is not None and insn.addr == prev_end:
            current += insn.raw
        else:
            if current_start is not None:
                runs.append((current_start, current))
            current_start = insn.addr
            current = insn.raw
        prev_end = insn.end
    if current_start is not None:
        runs.append((current_start, current))

    for start, blob in runs:
        for pattern in _SYS_SCAN_PATTERNS:
            pos = blob.find(pattern)
            while pos != -1:
                addr = start + pos
                insn = by_addr.get(addr)
                if insn is not None and insn.raw.startswith(pattern) and _is_sys_core(insn):
                    anchors.append(addr)
                pos = blob.find(pattern, pos + 1)
    return sorted(set(anchors))


def find_gadgets(
    insns: Sequence[Instruction], opts: MiningOptions = MiningOptions()
) -> tuple[Gadget, ...]:
    """Mine gadget windows from a decoded stream.

    For each terminator, every byte-adjacent backward window up to
    opts.max_len instructions becomes a gadget, provided no unconditional
    control-flow break sits mid-window. System-entry terminators are located
    by the raw opcode scan with alignment verification.
    """
    stream = sorted(insns, key=lambda i: i.addr)
    index_of = {insn.addr: pos for pos, insn in enumerate(stream)}

    sys_anchor_addrs = set(locate_sys_anchors(stream))
    terminator_positions = []
    for pos, insn in enumerate(stream):
        if insn.mnemonic in _RET_CLASS or insn.mnemonic in (
            Mnemonic.JMP_RM,
            Mnemonic.CALL_RM,
        ):
            terminator_positions.append(pos)
        elif _is_sys_core(insn):
            if insn.addr in sys_anchor_addrs:
                terminator_positions.append(pos)
        elif opts.enable_heuristic_types and insn.mnemonic is Mnemonic.JMP_REL:
            terminator_positions.append(pos)

    blockers = {Mnemonic.RET, Mnemonic.RET_IMM, Mnemonic.JMP_REL, Mnemonic.JMP_RM}
    gadgets: list[Gadget] = []
    for pos in terminator_positions:
        window: list[Instruction] = [stream[pos]]
        for back in range(1, opts.max_len):
            prev_pos = pos - back
            if prev_pos < 0:
                break
            prev = stream[prev_pos]
            if prev.end != window[0].addr:
                break
            if prev.mnemonic in blockers:
                break
            window.insert(0, prev)
            _emit(gadgets, window, opts)
        # The single-instruction window comes last so ordering by (addr, len)
        # below is what callers see; emit it now regardless.
        _emit(gadgets, [stream[pos]], opts)

    gadgets.sort(key=lambda g: (g.addr, g.length))
    return tuple(gadgets)


def _emit(out: list[Gadget], window: Sequence[Instruction], opts: MiningOptions) -> None:
    cls = classify(window, enable_heuristic_types=opts.enable_heuristic_types)
    out.append(
        Gadget(
            addr=window[0].addr,
            insns=tuple(window),
            types=cls.types,
            footprints=dict(cls.footprints),
            core_index=dict(cls.core_index),
        )
    )


@dataclass(frozen=True)
class GadgetSetSpec:
    """A named set of required gadget types."""

    name: str
    required: tuple[GadgetType, ...]

    def __post_init__(self) -> None:
        if len(set(self.required)) != len(self.required):
            raise ValueError("duplicate types in set spec")
        if not self.required:
            raise ValueError("set spec requires at least one type")


TC_SET = GadgetSetSpec(
    "tc",
    (
        GadgetType.LM, GadgetType.SM, GadgetType.LR, GadgetType.MR,
        GadgetType.AM, GadgetType.AM_LD, GadgetType.AM_ST, GadgetType.LOGIC,
        GadgetType.JMP, GadgetType.CALL, GadgetType.SYS,
    ),
)
PRIORITY_SET = GadgetSetSpec(
    "priority",
    (
        GadgetType.LR, GadgetType.AM, GadgetType.LM, GadgetType.JMP,
        GadgetType.ST, GadgetType.SP, GadgetType.LOGIC, GadgetType.MR,
        GadgetType.CALL, GadgetType.SYS,
    ),
)
MOV_TC_SET = GadgetSetSpec(
    "movtc",
    (
        GadgetType.MR, GadgetType.ST, GadgetType.STCONSTEX,
        GadgetType.STCONST, GadgetType.LM, GadgetType.LMEX, GadgetType.SYS,
    ),
)

BUILTIN_SETS: dict[str, GadgetSetSpec] = {
    s.name: s for s in (TC_SET, PRIORITY_SET, MOV_TC_SET)
}


def load_set_spec(path: str | Path) -> GadgetSetSpec:
    """Load a user-defined set spec: {"name": ..., "types": ["LM", ...]}."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or "name" not in data or "types" not in data:
        raise ValueError("set spec must be an object with 'name' and 'types'")
    by_value = {t.value: t for t in GadgetType}
    types = []
    for name in data["types"]:
        if name not in by_value:
            raise ValueError(f"unknown gadget type {name!r}")
        types.append(by_value[name])
    return GadgetSetSpec(str(data["name"]), tuple(types))


def resolve_set(name: str) -> GadgetSetSpec:
    if name not in BUILTIN_SETS:
        raise ValueError(
            f"unknown gadget set {name!r}; built-ins: {sorted(BUILTIN_SETS)}"
        )
    return BUILTIN_SETS[name]


@dataclass
class TypeCount:
    min_fp: int = 0
    ex_fp: int = 0

    @property
    def total(self) -> int:
        return self.min_fp + self.ex_fp


@dataclass
class CoverageReport:
    """Per-type counts for one set spec over a gadget collection."""

    spec_name: str
    counts: dict[GadgetType, TypeCount]

    @property
    def converged(self) -> bool:
        return all(c.total >= 1 for c in self.counts.values())

    @property
    def converged_min_fp(self) -> bool:
        return all(c.min_fp >= 1 for c in self.counts.values())

    def missing(self) -> tuple[GadgetType, ...]:
        return tuple(t for t, c in self.counts.items() if c.total == 0)

    def to_dict(self) -> dict:
        return {
            "set": self.spec_name,
            "converged": self.converged,
            "converged_min_fp": self.converged_min_fp,
            "types": {
                t.value: {"min_fp": c.min_fp, "ex_fp": c.ex_fp}
                for t, c in self.counts.items()
            },
        }


def evaluate_set(
    gadgets: Iterable[Gadget], spec: GadgetSetSpec
) -> CoverageReport:
    counts = {t: TypeCount() for t in spec.required}
    for gadget in gadgets:
        for gtype in gadget.types & set(spec.required):
            if gadget.footprints[gtype] is Footprint.MIN_FP:
                counts[gtype].min_fp += 1
            else:
                counts[gtype].ex_fp += 1
    return CoverageReport(spec.name, counts)


def leaked_types(gadgets: Iterable[Gadget]) -> frozenset[GadgetType]:
    out: set[GadgetType] = set()
    for gadget in gadgets:
        out |= gadget.types
    return frozenset(out)


def category_counts(
    gadgets: Iterable[Gadget],
) -> dict[str, TypeCount]:
    """MIN/EX counts of expressiveness-core gadgets grouped by operation
    category. A gadget contributes once per category it has a type in."""
    out = {name: TypeCount() for name in TC_CATEGORIES}
    for gadget in gadgets:
        for name, members in TC_CATEGORIES.items():
            present = [t for t in members if t in gadget.types]
            if not present:
                continue
            if any(
                gadget.footprints[t] is Footprint.MIN_FP for t in present
            ):
                out[name].min_fp += 1
            else:
                out[name].ex_fp += 1
    return out


def gadget_report_rows(gadgets: Iterable[Gadget]) -> list[dict]:
    rows = []
    for g in gadgets:
        rows.append(
            {
                "addr": f"{g.addr:#x}",
                "bytes_hex": g.raw.hex(),
                "text": g.render(),
                "types": "|".join(sorted(t.value for t in g.types)),
                "footprints": "|".join(
                    f"{t.value}={g.footprints[t].value}"
                    for t in sorted(g.types, key=lambda t: t.value)
                ),
            }
        )
    return rows


def gadget_report_json(gadgets: Iterable[Gadget]) -> str:
    return json.dumps(
        {"gadgets": gadget_report_rows(gadgets)},
        sort_keys=True,
        separators=(",", ":"),
    )


def gadget_report_csv(gadgets: Iterable[Gadget]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf,
        fieldnames=["addr", "bytes_hex", "text", "types", "footprints"],
        lineterminator="\n",
    )
    writer.writeheader()
    for row in gadget_report_rows(gadgets):
        writer.writerow(row)
    return buf.getvalue()
