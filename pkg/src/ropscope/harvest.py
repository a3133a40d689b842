"""Recursive code-page harvesting from a single leaked code pointer.

Starting from one pointer into an executable page, the harvester leaks that
page, disassembles it by recursive traversal, extracts control-flow targets
(direct call/jump/branch destinations plus code pointers read through
rip-relative indirect branch slots), and repeats for every newly revealed
executable page until no new pages or instructions appear.

Progress is measured on a deterministic clock: leaking a page costs a fixed
number of ticks, analyzing one newly decoded instruction costs another.
The trace records when each page and each gadget type first became
available, which is what rerandomization-interval analysis consumes.
"""

from __future__ import annotations

import json
import random
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from ropscope.disasm import (
    Instruction,
    PageDisasm,
    decode,
    extract_chain_targets,
)
from ropscope.gadgets import (
    Gadget,
    GadgetSetSpec,
    GadgetType,
    MiningOptions,
    find_gadgets,
    leaked_types,
)
from ropscope.snapshot import PAGE_SIZE, MemoryImage, page_base


class StartPointerInvalid(ValueError):
    """The starting pointer does not land in mapped executable memory."""


@dataclass(frozen=True)
class HarvestOptions:
    seed: int = 0
    leak_ticks_per_page: int = 100
    analysis_ticks_per_insn: int = 1
    follow_cond_branches: bool = True
    max_gadget_len: int = 5
    enable_heuristic_types: bool = False
    track_set: GadgetSetSpec | None = None
    stop_on_convergence: bool = False
    measure_wall_clock: bool = False
    start_strategy: str = "lowest"

    def mining_options(self) -> MiningOptions:
        return MiningOptions(
            max_len=self.max_gadget_len,
            enable_heuristic_types=self.enable_heuristic_types,
        )


class EventKind(str, Enum):
    PAGE_DISCOVERED = "page_discovered"
    TYPE_LEAKED = "type_leaked"
    CONVERGED = "converged"

    def __str__(self) -> str:  # pragma: no cover - trivial
        return self.value


@dataclass(frozen=True)
class HarvestEvent:
    step: int
    clock: int
    kind: EventKind
    payload: Mapping[str, object]

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "clock": self.clock,
            "kind": self.kind.value,
            "payload": dict(self.payload),
        }


@dataclass
class HarvestTrace:
    start: int
    events: list[HarvestEvent]
    leak_cost: int
    analysis_cost: int
    pages_found: int
    skipped_targets: int
    converged: bool
    wall_seconds: float | None = None
    # Analysis products; not part of the serialized trace.
    streams: dict[int, tuple[Instruction, ...]] = field(default_factory=dict)
    gadgets: tuple[Gadget, ...] = ()

    @property
    def total_cost(self) -> int:
        return self.leak_cost + self.analysis_cost

    def pages(self) -> tuple[int, ...]:
        return tuple(
            e.payload["base"]  # type: ignore[misc]
            for e in self.events
            if e.kind is EventKind.PAGE_DISCOVERED
        )

    def type_clocks(self) -> dict[GadgetType, int]:
        """Clock value at which each gadget type first became available."""
        out: dict[GadgetType, int] = {}
        by_value = {t.value: t for t in GadgetType}
        for e in self.events:
            if e.kind is EventKind.TYPE_LEAKED:
                out[by_value[str(e.payload["type"])]] = e.clock
        return out

    def convergence_clock(self) -> int | None:
        for e in self.events:
            if e.kind is EventKind.CONVERGED:
                return e.clock
        return None

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "start": f"{self.start:#x}",
                    "leak_cost": self.leak_cost,
                    "analysis_cost": self.analysis_cost,
                    "total_cost": self.total_cost,
                    "pages_found": self.pages_found,
                    "skipped_targets": self.skipped_targets,
                    "converged": self.converged,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        ]
        for e in self.events:
            lines.append(
                json.dumps(e.to_dict(), sort_keys=True, separators=(",", ":"))
            )
        return "\n".join(lines) + "\n"


@dataclass
class _PageState:
    disasm: PageDisasm
    pending: set[int] = field(default_factory=set)


def harvest(
    image: MemoryImage, start: int, opts: HarvestOptions = HarvestOptions()
) -> HarvestTrace:
    """Run the harvesting loop from one leaked code pointer."""
    if not image.is_executable(start):
        raise StartPointerInvalid(
            f"start pointer {start:#x} is not in executable memory"
        )

    t0 = time.perf_counter() if opts.measure_wall_clock else None
    mining = opts.mining_options()
    tracked = set(opts.track_set.required) if opts.track_set else None

    clock = 0
    leak_cost = 0
    analysis_cost = 0
    step = 0
    skipped = 0
    converged = False
    events: list[HarvestEvent] = []
    states: dict[int, _PageState] = {}
    handled_targets: set[int] = set()
    seen_types: set[GadgetType] = set()
    page_gadgets: dict[int, tuple[Gadget, ...]] = {}

    # Work items are page bases; a page is re-processed whenever new entry
    # points into it are pending.
    queue: deque[int] = deque()
    queued: set[int] = set()

    def enqueue(base: int) -> None:
        if base not in queued:
            queue.append(base)
            queued.add(base)

    def add_target(addr: int) -> None:
        nonlocal skipped
        if addr in handled_targets:
            return
        handled_targets.add(addr)
        if not image.is_executable(addr):
            skipped += 1
            return
        base = page_base(addr)
        if base not in states:
            states[base] = _PageState(PageDisasm(image.page_at(addr)))
        states[base].pending.add(addr)
        enqueue(base)

    add_target(start)

    while queue:
        base = queue.popleft()
        queued.discard(base)
        state = states[base]
        if not state.pending and base in page_gadgets:
            continue

        if base not in page_gadgets:
            # First visit: the page leak itself.
            clock += opts.leak_ticks_per_page
            leak_cost += opts.leak_ticks_per_page
            step += 1
            events.append(
                HarvestEvent(
                    step, clock, EventKind.PAGE_DISCOVERED, {"base": base}
                )
            )

        entries = sorted(state.pending)
        state.pending.clear()
        new_insns = state.disasm.add_entries(entries)
        clock += new_insns * opts.analysis_ticks_per_insn
        analysis_cost += new_insns * opts.analysis_ticks_per_insn

        stream = state.disasm.instructions()
        if new_insns or base not in page_gadgets:
            page_gadgets[base] = find_gadgets(stream, mining)
            for target in sorted(
                extract_chain_targets(
                    stream, image, include_cond=opts.follow_cond_branches
                )
            ):
                add_target(target)

            new_types = _report_types(page_gadgets.values(), tracked) - seen_types
            for gtype in sorted(new_types, key=lambda t: t.value):
                step += 1
                events.append(
                    HarvestEvent(
                        step,
                        clock,
                        EventKind.TYPE_LEAKED,
                        {"type": gtype.value},
                    )
                )
            seen_types |= new_types

            if (
                tracked is not None
                and not converged
                and tracked <= seen_types
            ):
                converged = True
                step += 1
                events.append(
                    HarvestEvent(
                        step,
                        clock,
                        EventKind.CONVERGED,
                        {"set": opts.track_set.name},
                    )
                )
                if opts.stop_on_convergence:
                    break

    all_gadgets: list[Gadget] = []
    for b in sorted(page_gadgets):
        all_gadgets.extend(page_gadgets[b])

    wall = time.perf_counter() - t0 if t0 is not None else None
    return HarvestTrace(
        start=start,
        events=events,
        leak_cost=leak_cost,
        analysis_cost=analysis_cost,
        pages_found=len(page_gadgets),
        skipped_targets=skipped,
        converged=converged if tracked is not None else False,
        wall_seconds=wall,
        streams={
            b: states[b].disasm.instructions() for b in sorted(page_gadgets)
        },
        gadgets=tuple(all_gadgets),
    )


def _report_types(
    per_page: Iterable[tuple[Gadget, ...]],
    tracked: set[GadgetType] | None,
) -> set[GadgetType]:
    out: set[GadgetType] = set()
    for gadgets in per_page:
        out |= leaked_types(gadgets)
    if tracked is not None:
        out &= tracked
    return out


# Start-pointer discovery: one plausible leaked pointer per executable page.

_SWEEP_MIN_INSNS = 8


def _sweep_accepts(data: bytes, base: int, offset: int) -> bool:
    """Decode forward from an offset; accept streams that reach a control
    transfer, produce several valid instructions, or exit the page cleanly."""
    count = 0
    pos = offset
    while pos < len(data):
        insn = decode(data[pos:], base + pos)
        if insn is None:
            return False
        count += 1
        if insn.is_terminator:
            return True
        if count >= _SWEEP_MIN_INSNS:
            return True
        pos += insn.length
    return True


def collect_branch_targets(image: MemoryImage) -> dict[int, set[int]]:
    """Linear-scan every executable page, resynchronizing byte by byte on
    invalid opcodes, and collect direct branch targets keyed by the page
    they land in. Targets outside executable pages are dropped."""
    exec_pages = image.executable_pages()
    targets_by_page: dict[int, set[int]] = {p.base: set() for p in exec_pages}
    for page in exec_pages:
        pos = 0
        while pos < PAGE_SIZE:
            insn = decode(page.data[pos:], page.base + pos)
            if insn is None:
                pos += 1
                continue
            if insn.branch_target is not None:
                tbase = page_base(insn.branch_target)
                if tbase in targets_by_page:
                    targets_by_page[tbase].add(insn.branch_target)
            pos += insn.length
    return targets_by_page


def page_start_pointers(
    image: MemoryImage, opts: HarvestOptions = HarvestOptions()
) -> dict[int, int]:
    """Pick one start pointer per executable page.

    Direct branch targets collected from a linear scan of all executable
    bytes are preferred (lowest in-page target that decodes acceptably);
    otherwise the first offset whose forward decode is accepted; otherwise
    the page base.
    """
    exec_pages = image.executable_pages()
    targets_by_page = collect_branch_targets(image)
    out: dict[int, int] = {}
    for page in exec_pages:
        candidates = sorted(
            t
            for t in targets_by_page[page.base]
            if _sweep_accepts(page.data, page.base, t - page.base)
        )
        if candidates:
            if opts.start_strategy == "seeded":
                rng = random.Random(opts.seed ^ page.base)
                out[page.base] = rng.choice(candidates)
            else:
                out[page.base] = candidates[0]
            continue
        chosen = page.base
        for off in range(PAGE_SIZE):
            if _sweep_accepts(page.data, page.base, off):
                chosen = page.base + off
                break
        out[page.base] = chosen
    return out


def harvest_all_starts(
    image: MemoryImage, opts: HarvestOptions = HarvestOptions()
) -> dict[int, HarvestTrace]:
    """Harvest once from each per-page start pointer."""
    return {
        start: harvest(image, start, opts)
        for _, start in sorted(page_start_pointers(image, opts).items())
    }


def offline_disassemble(
    image: MemoryImage, opts: HarvestOptions = HarvestOptions()
) -> dict[int, tuple[Instruction, ...]]:
    """Disassemble every executable page without the leak clock.

    Seeds recursive traversal from every direct branch target the linear
    scan finds plus one fallback start per page, then follows chain targets
    to closure. Used for whole-image mining when the memory image is
    already in hand rather than leaked page by page."""
    starts = page_start_pointers(image, opts)
    seeds: set[int] = set(starts.values())
    for targets in collect_branch_targets(image).values():
        seeds |= targets
    streams: dict[int, tuple[Instruction, ...]] = {}
    states: dict[int, PageDisasm] = {}
    pending: deque[int] = deque(sorted(seeds))
    handled: set[int] = set()
    while pending:
        addr = pending.popleft()
        if addr in handled:
            continue
        handled.add(addr)
        if not image.is_executable(addr):
            continue
        base = page_base(addr)
        if base not in states:
            states[base] = PageDisasm(image.page_at(addr))
        if states[base].add_entries([addr]):
            stream = states[base].instructions()
            for target in sorted(
                extract_chain_targets(
                    stream, image, include_cond=opts.follow_cond_branches
                )
            ):
                if target not in handled:
                    pending.append(target)
    for base, st in states.items():
        streams[base] = st.instructions()
    return streams


def mine_image(
    image: MemoryImage, opts: HarvestOptions = HarvestOptions()
) -> tuple[Gadget, ...]:
    """Offline-disassemble the image and mine gadgets from every stream."""
    mining = opts.mining_options()
    out: list[Gadget] = []
    for base in sorted(streams := offline_disassemble(image, opts)):
        out.extend(find_gadgets(streams[base], mining))
    return tuple(out)
