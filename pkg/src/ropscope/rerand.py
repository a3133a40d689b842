"""Rerandomization interval analysis.

Runs the harvester from every plausible per-page start pointer and reduces
the traces to the defender-facing question: how quickly can an attacker who
leaks one pointer accumulate a working gadget set, and which rerandomization
intervals still defeat the fastest such run.

The model is single-round: the measured fastest convergence clock is the
upper bound the interval must not exceed. Mid-harvest layout shuffles that
invalidate partial knowledge are out of scope.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping, Sequence

from ropscope.gadgets import BUILTIN_SETS, GadgetSetSpec
from ropscope.harvest import (
    EventKind,
    HarvestOptions,
    harvest,
    page_start_pointers,
)
from ropscope.snapshot import MemoryImage


@dataclass(frozen=True)
class ConvergenceRecord:
    """Outcome of one harvesting run tracked against a gadget set.

    type_timeline holds (clock, cumulative distinct types available) pairs,
    one per newly leaked type; counts never decrease. leak_fraction is the
    share of total clock spent leaking pages rather than analyzing code.
    """

    start: int
    set_name: str
    converged: bool
    convergence_clock: int | None
    type_timeline: tuple[tuple[int, int], ...]
    leak_fraction: float
    total_cost: int
    pages_found: int

    def time_to_k_types(self, k: int) -> int | None:
        """Clock at which the k-th distinct tracked type became available."""
        if k <= 0:
            return 0
        for clock, count in self.type_timeline:
            if count >= k:
                return clock
        return None

    def final_type_count(self) -> int:
        return self.type_timeline[-1][1] if self.type_timeline else 0

    def to_dict(self) -> dict:
        return {
            "start": f"{self.start:#x}",
            "set": self.set_name,
            "converged": self.converged,
            "convergence_clock": self.convergence_clock,
            "leak_fraction": round(self.leak_fraction, 6),
            "total_cost": self.total_cost,
            "pages_found": self.pages_found,
            "type_timeline": [list(entry) for entry in self.type_timeline],
        }


def converge(
    image: MemoryImage,
    start: int,
    spec: GadgetSetSpec | None = None,
    opts: HarvestOptions = HarvestOptions(),
) -> ConvergenceRecord:
    """Harvest from one start until the tracked set is covered or the
    reachable code is exhausted."""
    if spec is None:
        spec = opts.track_set or BUILTIN_SETS["tc"]
    run_opts = replace(opts, track_set=spec, stop_on_convergence=True)
    trace = harvest(image, start, run_opts)
    timeline: list[tuple[int, int]] = []
    count = 0
    for event in trace.events:
        if event.kind is EventKind.TYPE_LEAKED:
            count += 1
            timeline.append((event.clock, count))
    fraction = (
        trace.leak_cost / trace.total_cost if trace.total_cost else 0.0
    )
    return ConvergenceRecord(
        start=start,
        set_name=spec.name,
        converged=trace.converged,
        convergence_clock=trace.convergence_clock(),
        type_timeline=tuple(timeline),
        leak_fraction=fraction,
        total_cost=trace.total_cost,
        pages_found=trace.pages_found,
    )


def merged_time_to_types(
    records: Sequence[ConvergenceRecord], n_types: int
) -> list[int | None]:
    """Best (minimum) clock to k available types over all runs, k=1..n."""
    out: list[int | None] = []
    for k in range(1, n_types + 1):
        times = [
            t for r in records if (t := r.time_to_k_types(k)) is not None
        ]
        out.append(min(times) if times else None)
    return out


def _non_reactive_intervals(
    merged: Sequence[int | None],
) -> tuple[tuple[int, int], ...]:
    """Maximal clock spans where the best attacker's available-type count
    stays constant; rerandomizing later inside a span defeats nothing
    extra."""
    intervals: list[tuple[int, int]] = []
    prev_clock = 0
    for clock in merged:
        if clock is None:
            break
        if clock > prev_clock:
            intervals.append((prev_clock, clock))
        prev_clock = clock
    return tuple(intervals)


@dataclass(frozen=True)
class UpperBoundReport:
    spec_name: str
    per_start: Mapping[int, ConvergenceRecord]
    minimum_clock: int | None
    average_clock: float | None
    non_reactive_intervals: tuple[tuple[int, int], ...]

    @property
    def converged_count(self) -> int:
        return sum(1 for r in self.per_start.values() if r.converged)

    def to_dict(self) -> dict:
        return {
            "set": self.spec_name,
            "starts": len(self.per_start),
            "converged_starts": self.converged_count,
            "minimum_clock": self.minimum_clock,
            "average_clock": self.average_clock,
            "non_reactive_intervals": [
                list(iv) for iv in self.non_reactive_intervals
            ],
            "per_start": [
                r.to_dict() for _, r in sorted(self.per_start.items())
            ],
        }

    def to_json(self) -> str:
        return json.dumps(
            self.to_dict(), sort_keys=True, separators=(",", ":")
        )

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["start", "clock", "types_available"])
        for _, record in sorted(self.per_start.items()):
            for clock, count in record.type_timeline:
                writer.writerow([f"{record.start:#x}", clock, count])
        return buf.getvalue()


def upper_bound(
    image: MemoryImage,
    spec: GadgetSetSpec | None = None,
    opts: HarvestOptions = HarvestOptions(),
) -> UpperBoundReport:
    """Converge from one deterministic pointer per code page; the minimum
    over converged runs is the largest interval that still defeats every
    measured attack path."""
    if spec is None:
        spec = opts.track_set or BUILTIN_SETS["tc"]
    records: dict[int, ConvergenceRecord] = {}
    for _, start in sorted(page_start_pointers(image, opts).items()):
        if start in records:
            continue
        records[start] = converge(image, start, spec, opts)

    converged_clocks = [
        r.convergence_clock
        for r in records.values()
        if r.converged and r.convergence_clock is not None
    ]
    minimum = min(converged_clocks) if converged_clocks else None
    average = (
        float(statistics.fmean(converged_clocks)) if converged_clocks else None
    )
    merged = merged_time_to_types(list(records.values()), len(spec.required))
    return UpperBoundReport(
        spec_name=spec.name,
        per_start=records,
        minimum_clock=minimum,
        average_clock=average,
        non_reactive_intervals=_non_reactive_intervals(merged),
    )


class IntervalSafety(str, Enum):
    SAFE = "safe"
    UNSAFE = "unsafe"

    def __str__(self) -> str:  # pragma: no cover - trivial
        return self.value


def evaluate_interval(
    interval: int,
    image: MemoryImage | None = None,
    spec: GadgetSetSpec | None = None,
    opts: HarvestOptions = HarvestOptions(),
    report: UpperBoundReport | None = None,
) -> IntervalSafety:
    """Judge a rerandomization interval against measured convergence.

    Unsafe exactly when the fastest converged run beats the interval
    strictly: rerandomizing at the same tick the attacker would finish
    still defeats the attack. Passing a precomputed report skips the
    harvesting sweep.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    if report is None:
        if image is None:
            raise ValueError("need either a memory image or a report")
        report = upper_bound(image, spec, opts)
    if report.minimum_clock is not None and report.minimum_clock < interval:
        return IntervalSafety.UNSAFE
    return IntervalSafety.SAFE
