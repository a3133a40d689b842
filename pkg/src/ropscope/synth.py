"""Synthetic code-corpus generation with controllable rerandomization.

Generates programs as lists of functions over a small instruction IR, lays
them out into executable pages, and re-lays them under rerandomization
schemes of increasing granularity: whole-image shift, function permutation,
basic-block permutation, and single-instruction dispersal.

Every generated program carries exact ground truth: which gadget patterns
were planted and where, which pages reference which other pages through
branches, and the function call graph. Layout keeps relocation units inside
page boundaries and separates them with invalid filler bytes so instruction
streams never run across unit boundaries; gadget windows therefore live
entirely inside one unit, which is what makes ground truth exact.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

from ropscope import encode as enc
from ropscope.disasm import POISON_BYTE, Reg, decode
from ropscope.gadgets import GadgetType
from ropscope.snapshot import (
    PAGE_SIZE,
    RX,
    MemoryImage,
    PageRecord,
    SegmentTag,
    page_base,
)

# Registers eligible for renaming and for random operand picks. The stack
# pointer stays fixed so renaming cannot change which instructions pivot,
# and rbp stays fixed because frame-teardown patterns pin it.
RENAME_DOMAIN: tuple[Reg, ...] = (
    Reg.RAX, Reg.RCX, Reg.RDX, Reg.RBX, Reg.RSI, Reg.RDI,
    Reg.R8, Reg.R9, Reg.R10, Reg.R11, Reg.R12, Reg.R13, Reg.R14, Reg.R15,
)

# Immediate whose every byte decodes as an invalid opcode; keeps misaligned
# decode paths from resynchronizing into phantom instructions.
POISON_IMM32 = int.from_bytes(bytes([POISON_BYTE] * 4), "little")

FUNCTION_GAP = 8
CELL_GAP_MIN = 1
CELL_GAP_MAX = 2

# Items whose ops never fall through to the next item.
_NO_FALLTHROUGH_OPS = frozenset(
    {"ret", "ret_imm", "jmp_rel32", "jmp_rel8", "jmp_r", "jmp_m"}
)


@dataclass(frozen=True)
class AsmItem:
    """One instruction in the generator IR.

    op names an encoder function; args are its arguments minus any branch
    displacement. Branch items carry target=(function index, item index)
    and get their displacement resolved at layout time. pin marks items
    whose registers must survive renaming untouched.
    """

    op: str
    args: tuple = ()
    target: tuple[int, int] | None = None
    pin: bool = False

    @property
    def falls_through(self) -> bool:
        return self.op not in _NO_FALLTHROUGH_OPS


@dataclass(frozen=True)
class PlantSpec:
    gtype: GadgetType
    fn_idx: int
    start_item: int
    n_items: int


@dataclass
class SynthFunction:
    items: list[AsmItem]
    block_starts: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class GenParams:
    n_functions: int = 12
    mean_fn_len: int = 10
    connectivity: float = 0.25
    gadget_mix: Mapping[GadgetType, int] | None = None
    ensure_strongly_connected: bool = True
    max_functions_per_page: int | None = None
    base: int = 0x400000

    def to_dict(self) -> dict:
        return {
            "n_functions": self.n_functions,
            "mean_fn_len": self.mean_fn_len,
            "connectivity": self.connectivity,
            "gadget_mix": None
            if self.gadget_mix is None
            else {t.value: n for t, n in sorted(
                self.gadget_mix.items(), key=lambda kv: kv[0].value
            )},
            "ensure_strongly_connected": self.ensure_strongly_connected,
            "max_functions_per_page": self.max_functions_per_page,
            "base": self.base,
        }

    @staticmethod
    def from_dict(data: Mapping) -> "GenParams":
        mix = data.get("gadget_mix")
        if mix is not None:
            by_value = {t.value: t for t in GadgetType}
            mix = {by_value[k]: int(v) for k, v in mix.items()}
        return GenParams(
            n_functions=int(data["n_functions"]),
            mean_fn_len=int(data["mean_fn_len"]),
            connectivity=float(data["connectivity"]),
            gadget_mix=mix,
            ensure_strongly_connected=bool(data["ensure_strongly_connected"]),
            max_functions_per_page=data.get("max_functions_per_page"),
            base=int(data["base"]),
        )


class SchemeKind(str, Enum):
    COARSE = "coarse"
    FUNCTION = "function"
    BLOCK = "block"
    INSTRUCTION = "instruction"

    def __str__(self) -> str:  # pragma: no cover - trivial
        return self.value


@dataclass(frozen=True)
class RandomizationScheme:
    kind: SchemeKind
    seed: int = 0
    rename_registers: bool = False

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "seed": self.seed,
            "rename_registers": self.rename_registers,
        }

    @staticmethod
    def from_dict(data: Mapping) -> "RandomizationScheme":
        return RandomizationScheme(
            kind=SchemeKind(data["kind"]),
            seed=int(data.get("seed", 0)),
            rename_registers=bool(data.get("rename_registers", False)),
        )


@dataclass(frozen=True)
class PlantRecord:
    gtype: GadgetType
    addr: int
    n_items: int
    fn_idx: int


@dataclass(frozen=True)
class GroundTruth:
    planted: tuple[PlantRecord, ...]
    page_edges: Mapping[int, frozenset[int]]
    function_entries: tuple[int, ...]
    function_pages: tuple[frozenset[int], ...]
    call_graph: tuple[tuple[int, int], ...]
    multi_instruction_plants: int

    def reachable_pages(self, start_page: int) -> frozenset[int]:
        """Transitive closure over branch page edges."""
        seen = {start_page}
        frontier = [start_page]
        while frontier:
            page = frontier.pop()
            for nxt in self.page_edges.get(page, frozenset()):
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        return frozenset(seen)

    def to_dict(self) -> dict:
        return {
            "planted": [
                {
                    "type": p.gtype.value,
                    "addr": f"{p.addr:#x}",
                    "n_items": p.n_items,
                    "fn": p.fn_idx,
                }
                for p in self.planted
            ],
            "page_edges": {
                f"{page:#x}": sorted(f"{t:#x}" for t in targets)
                for page, targets in sorted(self.page_edges.items())
            },
            "function_entries": [f"{a:#x}" for a in self.function_entries],
            "function_pages": [
                sorted(f"{p:#x}" for p in pages)
                for pages in self.function_pages
            ],
            "call_graph": [list(e) for e in self.call_graph],
            "multi_instruction_plants": self.multi_instruction_plants,
        }


@dataclass
class SynthProgram:
    params: GenParams
    seed: int
    functions: list[SynthFunction]
    plants: list[PlantSpec]
    call_graph: tuple[tuple[int, int], ...]


# Plant templates. Each returns IR items whose leading instructions form the
# named gadget in minimal footprint once a return or indirect branch closes
# the window.


def _pick(rng: random.Random, exclude: Iterable[Reg] = ()) -> Reg:
    pool = [r for r in RENAME_DOMAIN if r not in set(exclude)]
    return rng.choice(pool)


def _plant_items(
    gtype: GadgetType, rng: random.Random
) -> list[AsmItem] | None:
    a = _pick(rng)
    b = _pick(rng, exclude=(a,))
    c = _pick(rng, exclude=(a, b))
    if gtype is GadgetType.MR:
        return [AsmItem("mov_rr", (a, b)), AsmItem("ret")]
    if gtype is GadgetType.LR:
        return [AsmItem("pop_r", (a,)), AsmItem("ret")]
    if gtype is GadgetType.AM:
        return [AsmItem("alu_rr", ("add", a, b)), AsmItem("ret")]
    if gtype is GadgetType.LM:
        return [AsmItem("mov_rm", (a, b)), AsmItem("ret")]
    if gtype is GadgetType.AM_LD:
        return [AsmItem("alu_rm", ("add", a, b)), AsmItem("ret")]
    if gtype is GadgetType.SM:
        return [AsmItem("mov_mr", (a, b)), AsmItem("ret")]
    if gtype is GadgetType.ST:
        return [AsmItem("mov_mr", (a, b)), AsmItem("ret")]
    if gtype is GadgetType.AM_ST:
        return [AsmItem("alu_mr", ("sub", a, b)), AsmItem("ret")]
    if gtype is GadgetType.LOGIC:
        return [AsmItem("alu_rr", ("xor", a, b)), AsmItem("ret")]
    if gtype is GadgetType.SP:
        return [AsmItem("mov_rr", (Reg.RSP, b)), AsmItem("ret")]
    if gtype is GadgetType.JMP:
        return [AsmItem("jmp_r", (a,))]
    if gtype is GadgetType.CALL:
        return [AsmItem("call_r", (a,))]
    if gtype is GadgetType.SYS:
        return [AsmItem("syscall"), AsmItem("ret")]
    if gtype is GadgetType.STCONST:
        return [AsmItem("mov_mi", (a, 0x11)), AsmItem("ret")]
    if gtype is GadgetType.STCONSTEX:
        return [AsmItem("mov_mr", (a, b, 8)), AsmItem("ret")]
    if gtype is GadgetType.LMEX:
        return [AsmItem("mov_rm", (a, b, 16)), AsmItem("ret")]
    if gtype is GadgetType.CP:
        return [AsmItem("mov_mr", (a, b)), AsmItem("call_r", (c,))]
    if gtype is GadgetType.CS2:
        return [AsmItem("call_r", (a,)), AsmItem("ret")]
    if gtype is GadgetType.RF:
        return [
            AsmItem("mov_mr", (a, b)),
            AsmItem("call_r", (c,)),
            AsmItem("jmp_r", (a,)),
        ]
    if gtype is GadgetType.EP:
        return [
            AsmItem("pop_r", (Reg.RBP,), None, True),
            AsmItem("call_r", (a,)),
        ]
    if gtype is GadgetType.BROP:
        pops = [
            AsmItem("pop_r", (r,), None, True)
            for r in (
                Reg.RBX, Reg.RBP, Reg.R12, Reg.R13,
                Reg.R14, Reg.RSI, Reg.R15, Reg.RDI,
            )
        ]
        return pops + [AsmItem("ret")]
    if gtype is GadgetType.STOP:
        return [AsmItem("jmp_rel8", (-2,))]
    return None


PLANTABLE_TYPES: tuple[GadgetType, ...] = tuple(
    t
    for t in GadgetType
    if _plant_items(t, random.Random(0)) is not None
)


def default_gadget_mix() -> dict[GadgetType, int]:
    mix = {
        GadgetType.LR: 3, GadgetType.MR: 2, GadgetType.AM: 2,
        GadgetType.LM: 2, GadgetType.SM: 2, GadgetType.AM_LD: 1,
        GadgetType.AM_ST: 1, GadgetType.LOGIC: 2, GadgetType.SP: 1,
        GadgetType.JMP: 2, GadgetType.CALL: 2, GadgetType.SYS: 1,
        GadgetType.STCONST: 1, GadgetType.STCONSTEX: 1, GadgetType.LMEX: 1,
        GadgetType.CP: 1, GadgetType.CS2: 1, GadgetType.RF: 1,
        GadgetType.EP: 1, GadgetType.BROP: 1,
    }
    return mix


# Fillers: instructions that never form gadget cores and carry no branch
# targets. mov_ri is core-bearing (register assignment) so it only appears
# in positions that cannot sit directly before a window-closing return.
_SAFE_FILLERS: tuple[Callable[[random.Random], AsmItem], ...] = (
    lambda rng: AsmItem("nop"),
    lambda rng: AsmItem("test_rr", (_pick(rng), _pick(rng))),
    lambda rng: AsmItem("inc_r", (_pick(rng),)),
    lambda rng: AsmItem("dec_r", (_pick(rng),)),
    lambda rng: AsmItem("alu_rr", ("cmp", _pick(rng), _pick(rng))),
)


def _filler(rng: random.Random, allow_core: bool) -> AsmItem:
    if allow_core and rng.random() < 0.3:
        return AsmItem("mov_ri", (_pick(rng), POISON_IMM32, 32))
    return rng.choice(_SAFE_FILLERS)(rng)


def generate(params: GenParams, seed: int) -> SynthProgram:
    """Build a program: functions of filler runs, cross-calls, and plants."""
    rng = random.Random(seed)
    n = params.n_functions
    if n < 1:
        raise ValueError("need at least one function")
    mix = dict(
        params.gadget_mix
        if params.gadget_mix is not None
        else default_gadget_mix()
    )
    for gtype in mix:
        if _plant_items(gtype, random.Random(0)) is None:
            raise ValueError(f"gadget type {gtype.value} is not plantable")

    # Call graph: independent coin per ordered pair, plus a ring when the
    # harvest-from-anywhere property is required.
    edges: set[tuple[int, int]] = set()
    for i in range(n):
        for j in range(n):
            if i != j and rng.random() < params.connectivity:
                edges.add((i, j))
    if params.ensure_strongly_connected and n > 1:
        for i in range(n):
            edges.add((i, (i + 1) % n))

    # Deal plants across functions.
    plant_queue: list[GadgetType] = []
    for gtype, count in sorted(mix.items(), key=lambda kv: kv[0].value):
        plant_queue.extend([gtype] * count)
    rng.shuffle(plant_queue)
    plants_per_fn: list[list[GadgetType]] = [[] for _ in range(n)]
    for k, gtype in enumerate(plant_queue):
        plants_per_fn[k % n].append(gtype)

    calls_per_fn: list[list[int]] = [[] for _ in range(n)]
    for i, j in sorted(edges):
        calls_per_fn[i].append(j)

    functions: list[SynthFunction] = []
    plant_specs: list[PlantSpec] = []
    for fn_idx in range(n):
        items: list[AsmItem] = []
        block_starts = [0]
        guarded = list(plants_per_fn[fn_idx])
        tail_type: GadgetType | None = guarded.pop() if guarded else None

        n_fill = max(2, int(rng.gauss(params.mean_fn_len, 2)))
        segments = 1 + len(guarded) + len(calls_per_fn[fn_idx])
        per_seg = max(1, n_fill // segments)

        def fill_run(count: int) -> None:
            for _ in range(count):
                items.append(_filler(rng, allow_core=True))

        fill_run(per_seg)
        for callee in calls_per_fn[fn_idx]:
            items.append(AsmItem("call_rel32", (), (callee, 0)))
            fill_run(per_seg)

        for gtype in guarded:
            # Guard: a conditional hop over the plant keeps the function
            # decodable end to end while the plant still closes a window.
            body = _plant_items(gtype, rng)
            assert body is not None
            skip_idx = len(items) + 1 + len(body)
            block_starts.append(len(items))
            items.append(
                AsmItem("jcc_rel32", (rng.randrange(16),), (fn_idx, skip_idx))
            )
            start = len(items)
            items.extend(body)
            plant_specs.append(
                PlantSpec(gtype, fn_idx, start, len(body))
            )
            if body[-1].falls_through:
                # Close the guarded segment; fall-through would otherwise
                # leak the plant window into the next filler run.
                items.append(AsmItem("ret"))
                skip_idx += 1
                items[block_starts[-1]] = AsmItem(
                    "jcc_rel32",
                    items[block_starts[-1]].args,
                    (fn_idx, skip_idx),
                )
            block_starts.append(len(items))
            fill_run(max(1, per_seg // 2))

        # Function tail: a plant in closing position, or a plain return
        # behind a coreless filler so no accidental window forms.
        if tail_type is not None:
            body = _plant_items(tail_type, rng)
            assert body is not None
            block_starts.append(len(items))
            start = len(items)
            items.extend(body)
            plant_specs.append(PlantSpec(tail_type, fn_idx, start, len(body)))
            if body[-1].falls_through:
                items.append(AsmItem("ret"))
        else:
            if items and items[-1].op == "mov_ri":
                items.append(AsmItem("nop"))
            items.append(AsmItem("ret"))

        # Normalize block starts: unique, sorted, in range.
        starts = sorted({s for s in block_starts if 0 <= s < len(items)})
        functions.append(SynthFunction(items=items, block_starts=starts))

    return SynthProgram(
        params=params,
        seed=seed,
        functions=functions,
        plants=plant_specs,
        call_graph=tuple(sorted(edges)),
    )


# Layout. Chunks are the relocation units of a scheme; each chunk is a run
# of items plus an optional trailing link jump, placed without straddling a
# page boundary and separated from its neighbors by invalid bytes.


@dataclass
class _Chunk:
    items: list[tuple[int, int]]  # (fn_idx, item_idx) in emission order
    link_to: tuple[int, int] | None = None
    gap_after: int = FUNCTION_GAP
    new_page_after: bool = False


_BRANCH_SIZES = {"call_rel32": 5, "jmp_rel32": 5, "jcc_rel32": 6}


def _item_size(item: AsmItem) -> int:
    if item.target is not None or item.op in _BRANCH_SIZES:
        return _BRANCH_SIZES.get(item.op) or len(
            getattr(enc, item.op)(*item.args, 0)
        )
    return len(getattr(enc, item.op)(*item.args))


def _rename_args(item: AsmItem, mapping: Mapping[Reg, Reg]) -> AsmItem:
    if item.pin:
        return item
    new_args = tuple(
        mapping.get(a, a) if isinstance(a, Reg) else a for a in item.args
    )
    return replace(item, args=new_args)


def _layout(
    program: SynthProgram,
    chunks: Sequence[_Chunk],
    start_base: int,
    renames: Mapping[int, Mapping[Reg, Reg]] | None = None,
) -> tuple[MemoryImage, GroundTruth]:
    def resolved_item(fn_idx: int, item_idx: int) -> AsmItem:
        item = program.functions[fn_idx].items[item_idx]
        if renames and fn_idx in renames:
            item = _rename_args(item, renames[fn_idx])
        return item

    # Pass 1: place chunks, record every item's address.
    addr_of: dict[tuple[int, int], int] = {}
    link_addr: list[int | None] = []
    cursor = start_base
    placements: list[tuple[int, _Chunk]] = []
    last_used = start_base
    for chunk in chunks:
        size = sum(_item_size(resolved_item(f, i)) for f, i in chunk.items)
        if chunk.link_to is not None:
            size += _BRANCH_SIZES["jmp_rel32"]
        if size > PAGE_SIZE:
            raise ValueError("relocation unit larger than a page")
        if page_base(cursor) != page_base(cursor + size - 1):
            cursor = page_base(cursor) + PAGE_SIZE
        placements.append((cursor, chunk))
        pos = cursor
        for f, i in chunk.items:
            addr_of[(f, i)] = pos
            pos += _item_size(resolved_item(f, i))
        link_addr.append(pos if chunk.link_to is not None else None)
        cursor = pos + (
            _BRANCH_SIZES["jmp_rel32"] if chunk.link_to is not None else 0
        )
        last_used = max(last_used, cursor)
        cursor += chunk.gap_after
        if chunk.new_page_after:
            cursor = page_base(cursor) + PAGE_SIZE

    # Pass 2: encode with resolved branch displacements. Pages past the
    # last emitted byte are never materialized.
    lo_page = page_base(start_base)
    hi_page = page_base(last_used - 1 if last_used > start_base else start_base)
    n_pages = (hi_page - lo_page) // PAGE_SIZE + 1
    blob = bytearray(bytes([POISON_BYTE]) * (n_pages * PAGE_SIZE))

    page_edges: dict[int, set[int]] = {}

    def note_edge(insn_addr: int, target_addr: int) -> None:
        page_edges.setdefault(page_base(insn_addr), set()).add(
            page_base(target_addr)
        )

    def emit(addr: int, encoded: bytes) -> None:
        off = addr - lo_page
        blob[off : off + len(encoded)] = encoded

    for chunk_pos, (placed_at, chunk) in enumerate(placements):
        for f, i in chunk.items:
            item = resolved_item(f, i)
            addr = addr_of[(f, i)]
            if item.target is not None:
                target_addr = addr_of[item.target]
                size = _item_size(item)
                disp = target_addr - (addr + size)
                encoded = getattr(enc, item.op)(*item.args, disp)
                note_edge(addr, target_addr)
            else:
                encoded = getattr(enc, item.op)(*item.args)
                if item.op == "jmp_rel8":
                    size = len(encoded)
                    note_edge(addr, addr + size + item.args[0])
            assert len(encoded) == _item_size(item)
            emit(addr, encoded)
        la = link_addr[chunk_pos]
        if la is not None:
            assert chunk.link_to is not None
            target_addr = addr_of[chunk.link_to]
            disp = target_addr - (la + 5)
            emit(la, enc.jmp_rel32(disp))
            note_edge(la, target_addr)

    pages = []
    for k in range(n_pages):
        base = lo_page + k * PAGE_SIZE
        data = bytes(blob[k * PAGE_SIZE : (k + 1) * PAGE_SIZE])
        pages.append(PageRecord(base, RX, SegmentTag.CODE, data))
    image = MemoryImage(pages, metadata={"generator": "synth"})

    planted = tuple(
        PlantRecord(
            p.gtype, addr_of[(p.fn_idx, p.start_item)], p.n_items, p.fn_idx
        )
        for p in program.plants
    )
    entries = tuple(
        addr_of[(f, 0)] for f in range(len(program.functions))
    )
    fn_pages = []
    for f in range(len(program.functions)):
        touched: set[int] = set()
        for i in range(len(program.functions[f].items)):
            a = addr_of[(f, i)]
            item = resolved_item(f, i)
            touched.add(page_base(a))
            touched.add(page_base(a + _item_size(item) - 1))
        fn_pages.append(frozenset(touched))

    truth = GroundTruth(
        planted=planted,
        page_edges={p: frozenset(t) for p, t in sorted(page_edges.items())},
        function_entries=entries,
        function_pages=tuple(fn_pages),
        call_graph=program.call_graph,
        multi_instruction_plants=sum(
            1 for p in program.plants if p.n_items >= 2
        ),
    )
    return image, truth


def _function_chunks(
    program: SynthProgram, order: Sequence[int], params: GenParams
) -> list[_Chunk]:
    chunks = []
    per_page = params.max_functions_per_page
    for pos, f in enumerate(order):
        chunk = _Chunk(
            items=[(f, i) for i in range(len(program.functions[f].items))],
        )
        if per_page is not None and (pos + 1) % per_page == 0:
            chunk.new_page_after = True
        chunks.append(chunk)
    return chunks


def _block_chunks(
    program: SynthProgram, rng: random.Random
) -> list[_Chunk]:
    blocks: list[_Chunk] = []
    for f, fn in enumerate(program.functions):
        bounds = list(fn.block_starts) + [len(fn.items)]
        for b in range(len(bounds) - 1):
            span = [(f, i) for i in range(bounds[b], bounds[b + 1])]
            if not span:
                continue
            last = fn.items[span[-1][1]]
            link = None
            if last.falls_through and bounds[b + 1] < len(fn.items):
                link = (f, bounds[b + 1])
            blocks.append(_Chunk(items=span, link_to=link))
    rng.shuffle(blocks)
    return blocks


def _instruction_chunks(
    program: SynthProgram, rng: random.Random
) -> list[_Chunk]:
    cells: list[_Chunk] = []
    for f, fn in enumerate(program.functions):
        for i, item in enumerate(fn.items):
            link = None
            if item.falls_through and i + 1 < len(fn.items):
                link = (f, i + 1)
            cells.append(
                _Chunk(
                    items=[(f, i)],
                    link_to=link,
                    gap_after=rng.randint(CELL_GAP_MIN, CELL_GAP_MAX),
                )
            )
    rng.shuffle(cells)
    return cells


def materialize(program: SynthProgram) -> tuple[MemoryImage, GroundTruth]:
    """Identity layout: original function order at the requested base."""
    order = list(range(len(program.functions)))
    chunks = _function_chunks(program, order, program.params)
    return _layout(program, chunks, program.params.base)


def apply_scheme(
    program: SynthProgram, scheme: RandomizationScheme
) -> tuple[MemoryImage, GroundTruth]:
    """Re-lay the program under a rerandomization scheme."""
    rng = random.Random(scheme.seed)
    params = program.params
    n = len(program.functions)

    renames: Mapping[int, Mapping[Reg, Reg]] | None = None
    if scheme.rename_registers:
        if scheme.kind is not SchemeKind.FUNCTION:
            raise ValueError(
                "register renaming applies to function-level rerandomization"
            )
        renames = {}
        for f in range(n):
            perm = list(RENAME_DOMAIN)
            rng.shuffle(perm)
            renames[f] = dict(zip(RENAME_DOMAIN, perm))

    if scheme.kind is SchemeKind.COARSE:
        delta_pages = 1 + rng.randrange(63)
        order = list(range(n))
        chunks = _function_chunks(program, order, params)
        return _layout(
            program, chunks, params.base + delta_pages * PAGE_SIZE
        )
    if scheme.kind is SchemeKind.FUNCTION:
        order = list(range(n))
        rng.shuffle(order)
        chunks = _function_chunks(program, order, params)
        return _layout(program, chunks, params.base, renames)
    if scheme.kind is SchemeKind.BLOCK:
        chunks = _block_chunks(program, rng)
        return _layout(program, chunks, params.base)
    if scheme.kind is SchemeKind.INSTRUCTION:
        chunks = _instruction_chunks(program, rng)
        return _layout(program, chunks, params.base)
    raise ValueError(f"unknown scheme kind {scheme.kind!r}")


def erase_plants(
    image: MemoryImage,
    truth: GroundTruth,
    gtype: GadgetType,
) -> MemoryImage:
    """Overwrite every planted gadget of one type with invalid bytes,
    returning a new image. Models targeted gadget elimination."""
    spans = [
        (plant.addr, plant.n_items)
        for plant in truth.planted
        if plant.gtype is gtype
    ]
    new_pages = {p.base: bytearray(p.data) for p in image.pages}
    for addr, n_items in spans:
        pos = addr
        for _ in range(n_items):
            page = image.page_at(pos)
            insn = decode(
                page.data[pos - page.base :], pos
            )
            if insn is None:
                break
            new_pages[page.base][
                pos - page.base : pos - page.base + insn.length
            ] = bytes([POISON_BYTE]) * insn.length
            pos = insn.end

    rebuilt = [
        PageRecord(p.base, p.perms, p.tag, bytes(new_pages[p.base]))
        for p in image.pages
    ]
    return MemoryImage(rebuilt, metadata=dict(image.metadata))
