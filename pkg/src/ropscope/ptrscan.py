"""Code-pointer scanning over data memory.

Measures how exposed code addresses are in non-code memory: scan stack,
heap, or data pages for aligned machine words that land inside a target
address range, typically the mapped extent of one library. Every such word
is a potential bootstrap pointer for recursive code harvesting.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

from ropscope.snapshot import MemoryImage, SegmentTag


@dataclass(frozen=True)
class PointerHit:
    addr: int
    value: int
    tag: SegmentTag
    target_executable: bool


@dataclass(frozen=True)
class PointerScanReport:
    hits: tuple[PointerHit, ...]
    lib_range: tuple[int, int] | None
    scanned_pages: int
    scanned_words: int

    @property
    def occurrences(self) -> int:
        return len(self.hits)

    @property
    def unique_values(self) -> int:
        return len({h.value for h in self.hits})

    def by_tag(self) -> dict[SegmentTag, int]:
        out: dict[SegmentTag, int] = {}
        for h in self.hits:
            out[h.tag] = out.get(h.tag, 0) + 1
        return out

    def to_dict(self) -> dict:
        return {
            "lib_range": None
            if self.lib_range is None
            else [f"{self.lib_range[0]:#x}", f"{self.lib_range[1]:#x}"],
            "scanned_pages": self.scanned_pages,
            "scanned_words": self.scanned_words,
            "occurrences": self.occurrences,
            "unique_values": self.unique_values,
            "by_tag": {
                tag.name.lower(): count
                for tag, count in sorted(
                    self.by_tag().items(), key=lambda kv: kv[0].value
                )
            },
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["addr", "value", "segment", "target_executable"])
        for h in self.hits:
            writer.writerow(
                [
                    f"{h.addr:#x}",
                    f"{h.value:#x}",
                    h.tag.name.lower(),
                    int(h.target_executable),
                ]
            )
        return buf.getvalue()


def scan_pointers(
    image: MemoryImage,
    tags: Sequence[SegmentTag] | None = None,
    lib_range: tuple[int, int] | None = None,
    alignment: int = 8,
    require_executable_target: bool = True,
) -> PointerScanReport:
    """Scan aligned words in data pages for code addresses.

    tags restricts which segments are scanned (default: everything that is
    not executable). lib_range keeps only values in [lo, hi). Values must
    point at mapped memory; by default they must point at executable
    memory, since only those can seed code harvesting.
    """
    if alignment < 1:
        raise ValueError("alignment must be positive")
    if lib_range is not None and lib_range[0] >= lib_range[1]:
        raise ValueError("empty library range")

    wanted = None if tags is None else set(tags)
    hits: list[PointerHit] = []
    scanned_pages = 0
    scanned_words = 0
    for page in image.pages:
        if page.perms.executable:
            continue
        if wanted is not None and page.tag not in wanted:
            continue
        scanned_pages += 1
        data = page.data
        for off in range(0, len(data) - 7, alignment):
            scanned_words += 1
            value = int.from_bytes(data[off : off + 8], "little")
            if lib_range is not None and not (
                lib_range[0] <= value < lib_range[1]
            ):
                continue
            if not image.is_mapped(value):
                continue
            is_exec = image.is_executable(value)
            if require_executable_target and not is_exec:
                continue
            hits.append(
                PointerHit(
                    addr=page.base + off,
                    value=value,
                    tag=page.tag,
                    target_executable=is_exec,
                )
            )
    return PointerScanReport(
        hits=tuple(hits),
        lib_range=lib_range,
        scanned_pages=scanned_pages,
        scanned_words=scanned_words,
    )
