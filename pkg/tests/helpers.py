"""Shared builders used across the test modules."""

from __future__ import annotations

import struct

from ropscope.disasm import Instruction, decode
from ropscope.snapshot import (
    PAGE_SIZE,
    ImageBuilder,
    MemoryImage,
    Perms,
    SegmentTag,
)

RX = Perms(True, False, True)
RW = Perms(True, True, False)
RO = Perms(True, False, False)

BASE = 0x400000


def asm(*chunks: bytes) -> bytes:
    return b"".join(chunks)


def decode_stream(data: bytes, base: int = BASE) -> list[Instruction]:
    """Decode a byte string linearly; fixtures must decode cleanly."""
    out: list[Instruction] = []
    off = 0
    while off < len(data):
        insn = decode(data[off:], base + off)
        assert insn is not None, f"undecodable fixture byte at offset {off}"
        out.append(insn)
        off += insn.length
    return out


def code_image(
    code: bytes, base: int = BASE, fill: int = 0x06
) -> MemoryImage:
    """One executable region starting at base, poison-filled to page size."""
    builder = ImageBuilder()
    builder.put(base, code, perms=RX, tag=SegmentTag.CODE, fill=fill)
    return builder.build()


def multi_page_image(
    pages: dict[int, bytes], fill: int = 0x06
) -> MemoryImage:
    builder = ImageBuilder()
    for base, code in sorted(pages.items()):
        assert base % PAGE_SIZE == 0
        builder.put(base, code, perms=RX, tag=SegmentTag.CODE, fill=fill)
    return builder.build()


_EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
_PHDR = struct.Struct("<IIQQQQQQ")


def build_elf(segments: list[dict]) -> bytes:
    """Assemble a minimal ELF64 little-endian executable image.

    Each segment dict: vaddr, data, memsz (>= len(data)), flags (PF_* bits).
    Segment file bytes are packed back to back after the headers.
    """
    ehsize = _EHDR.size
    phoff = ehsize
    phnum = len(segments)
    data_off = phoff + phnum * _PHDR.size

    phdrs = b""
    blobs = b""
    off = data_off
    for seg in segments:
        data = seg["data"]
        memsz = seg.get("memsz", len(data))
        assert memsz >= len(data)
        phdrs += _PHDR.pack(
            seg.get("type", 1),
            seg["flags"],
            off,
            seg["vaddr"],
            seg["vaddr"],
            len(data),
            memsz,
            PAGE_SIZE,
        )
        blobs += data
        off += len(data)

    ident = b"\x7fELF" + bytes([2, 1, 1, 0]) + bytes(8)
    ehdr = _EHDR.pack(
        ident, 2, 0x3E, 1, segments[0]["vaddr"] if segments else 0,
        phoff, 0, 0, ehsize, _PHDR.size, phnum, 0, 0, 0,
    )
    return ehdr + phdrs + blobs


def gadget_multiset(gadgets) -> list[tuple]:
    """Stable comparable key per gadget for whole-image equality checks."""
    return sorted(
        (
            g.addr,
            g.length,
            tuple(sorted(t.value for t in g.types)),
            tuple(
                sorted((t.value, f.value) for t, f in g.footprints.items())
            ),
        )
        for g in gadgets
    )
