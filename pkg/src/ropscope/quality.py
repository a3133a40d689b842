"""Register-corruption analysis for classified gadgets.

A gadget's usefulness for a given type hinges on whether the instructions
surrounding the core clobber the registers the core depends on. Instructions
before the core corrupt it when they write one of the core's source
registers; instructions after the core corrupt it when they write one of the
core's destination registers. Compare and test instructions write only
flags, so they never corrupt.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from ropscope.disasm import Mnemonic, Reg
from ropscope.gadgets import Gadget, GadgetType

# Register-writing mnemonics that can clobber a core's inputs or outputs.
MODIFIER_MNEMONICS: frozenset[Mnemonic] = frozenset(
    {
        Mnemonic.MOV, Mnemonic.LEA, Mnemonic.ADD, Mnemonic.SUB,
        Mnemonic.IMUL, Mnemonic.IDIV, Mnemonic.POP, Mnemonic.INC,
        Mnemonic.DEC, Mnemonic.XCHG, Mnemonic.AND, Mnemonic.OR,
        Mnemonic.XOR, Mnemonic.NOT, Mnemonic.NEG, Mnemonic.SHL,
        Mnemonic.SHR,
    }
)


class GadgetShape(Enum):
    """Dataflow shape of a core instruction.

    TYPE1 cores read and write registers (arithmetic, register moves).
    TYPE2 cores only write a register (pop reg, mov reg, imm).
    TYPE3 cores only read registers (stores, indirect branches).
    """

    TYPE1 = "type1"
    TYPE2 = "type2"
    TYPE3 = "type3"


@dataclass(frozen=True)
class CorruptionVerdict:
    gadget_addr: int
    type_assessed: GadgetType
    shape: GadgetShape
    regset1: frozenset[Reg]
    regset2: frozenset[Reg]
    corrupted: bool
    unique_registers: int


def _filtered(regs: frozenset[Reg], keep_rsp: bool) -> frozenset[Reg]:
    if keep_rsp:
        return regs
    return regs - {Reg.RSP}


def analyze_corruption(gadget: Gadget, gtype: GadgetType) -> CorruptionVerdict:
    """Assess whether surrounding instructions corrupt the type's core."""
    if gtype not in gadget.core_index:
        raise ValueError(
            f"gadget at {gadget.addr:#x} has no {gtype.value} core"
        )
    core_idx = gadget.core_index[gtype]
    core = gadget.insns[core_idx]
    # Stack-pointer conflicts only matter when the stack pivot itself is the
    # behavior under assessment; every gadget touches rsp incidentally.
    keep_rsp = gtype is GadgetType.SP

    sources = _filtered(core.reads, keep_rsp)
    dests = _filtered(core.writes, keep_rsp)

    if not dests and sources:
        shape = GadgetShape.TYPE3
    elif dests and not sources:
        shape = GadgetShape.TYPE2
    else:
        shape = GadgetShape.TYPE1

    pre_writes: set[Reg] = set()
    for insn in gadget.insns[:core_idx]:
        if insn.mnemonic in MODIFIER_MNEMONICS:
            pre_writes |= insn.writes
    post_writes: set[Reg] = set()
    for insn in gadget.insns[core_idx + 1 :]:
        if insn.mnemonic in MODIFIER_MNEMONICS:
            post_writes |= insn.writes

    regset1 = frozenset(_filtered(frozenset(pre_writes), keep_rsp) & sources)
    regset2 = frozenset(_filtered(frozenset(post_writes), keep_rsp) & dests)

    if shape is GadgetShape.TYPE2:
        corrupted = bool(regset2)
    elif shape is GadgetShape.TYPE3:
        corrupted = bool(regset1)
    else:
        corrupted = bool(regset1) or bool(regset2)

    touched: set[Reg] = set()
    for insn in gadget.insns:
        touched |= insn.reads | insn.writes
    return CorruptionVerdict(
        gadget_addr=gadget.addr,
        type_assessed=gtype,
        shape=shape,
        regset1=regset1,
        regset2=regset2,
        corrupted=corrupted,
        unique_registers=len(touched),
    )


@dataclass(frozen=True)
class CorruptionSummary:
    type_assessed: GadgetType
    assessed: int
    corrupted: int
    rate: Fraction | None
    mean_unique_registers: float | None

    @property
    def rate_float(self) -> float | None:
        return None if self.rate is None else float(self.rate)


def corruption_rate(
    verdicts: Sequence[CorruptionVerdict], gtype: GadgetType
) -> CorruptionSummary:
    relevant = [v for v in verdicts if v.type_assessed is gtype]
    if not relevant:
        return CorruptionSummary(gtype, 0, 0, None, None)
    corrupted = sum(1 for v in relevant if v.corrupted)
    mean_regs = sum(v.unique_registers for v in relevant) / len(relevant)
    return CorruptionSummary(
        gtype,
        len(relevant),
        corrupted,
        Fraction(corrupted, len(relevant)),
        mean_regs,
    )


def assess_gadgets(
    gadgets: Iterable[Gadget],
    types: Iterable[GadgetType] | None = None,
) -> list[CorruptionVerdict]:
    """Assess every (gadget, type) pair, optionally restricted to types."""
    wanted = None if types is None else set(types)
    out: list[CorruptionVerdict] = []
    for gadget in gadgets:
        for gtype in sorted(gadget.types, key=lambda t: t.value):
            if wanted is not None and gtype not in wanted:
                continue
            out.append(analyze_corruption(gadget, gtype))
    return out


def summarize_by_type(
    verdicts: Sequence[CorruptionVerdict],
) -> Mapping[GadgetType, CorruptionSummary]:
    present = sorted(
        {v.type_assessed for v in verdicts}, key=lambda t: t.value
    )
    return {t: corruption_rate(verdicts, t) for t in present}


def corruption_report_csv(
    summaries: Mapping[GadgetType, CorruptionSummary],
) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["type", "assessed", "corrupted", "rate", "mean_unique_registers"]
    )
    for gtype in sorted(summaries, key=lambda t: t.value):
        s = summaries[gtype]
        writer.writerow(
            [
                gtype.value,
                s.assessed,
                s.corrupted,
                "" if s.rate is None else f"{float(s.rate):.6f}",
                ""
                if s.mean_unique_registers is None
                else f"{s.mean_unique_registers:.4f}",
            ]
        )
    return buf.getvalue()


def verdict_report_csv(verdicts: Sequence[CorruptionVerdict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        [
            "addr", "type", "shape", "regset1", "regset2",
            "corrupted", "unique_registers",
        ]
    )
    for v in verdicts:
        writer.writerow(
            [
                f"{v.gadget_addr:#x}",
                v.type_assessed.value,
                v.shape.value,
                "|".join(sorted(r.name.lower() for r in v.regset1)),
                "|".join(sorted(r.name.lower() for r in v.regset2)),
                int(v.corrupted),
                v.unique_registers,
            ]
        )
    return buf.getvalue()
