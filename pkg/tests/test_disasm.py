"""Decoder truth tables, stream disassembly, and chain-target extraction."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import BASE, RO, RX, asm, code_image, decode_stream
from ropscope.disasm import (
    MemAccess,
    Mnemonic,
    PageDisasm,
    Reg,
    decode,
    disassemble_page,
    extract_chain_targets,
)
from ropscope.encode import (
    alu_mi,
    alu_mr,
    alu_ri,
    alu_rm,
    alu_rr,
    call_m,
    call_r,
    call_rel32,
    call_rip,
    dec_m,
    gs_call,
    imul_rm,
    imul_rr,
    inc_r,
    int80,
    int_n,
    jcc_rel8,
    jcc_rel32,
    jmp_m,
    jmp_r,
    jmp_rel8,
    jmp_rel32,
    jmp_rip,
    lea,
    leave,
    mov_mi,
    mov_mr,
    mov_ri,
    mov_ri_modrm,
    mov_rm,
    mov_rr,
    neg_r,
    nop,
    not_r,
    pop_r,
    push_r,
    ret,
    ret_imm,
    shl_mi,
    shl_ri,
    shr_cl,
    sysenter,
    syscall,
    xchg_rax,
    xchg_rr,
)
from ropscope.encode import test_rr as enc_test_rr
from ropscope.snapshot import ImageBuilder, SegmentTag

# encoding -> expected text, one row per operand shape the decoder handles
RENDER_TABLE = [
    (mov_rr(Reg.RAX, Reg.RBX), "mov rax, rbx"),
    (mov_rr(Reg.R8, Reg.R15, width=32), "mov r8d, r15d"),
    (mov_rm(Reg.RAX, Reg.RDX), "mov rax, [rdx]"),
    (mov_rm(Reg.RCX, Reg.RSI, disp=0x10), "mov rcx, [rsi+0x10]"),
    (mov_rm(Reg.RBX, Reg.R13, disp=-0x200), "mov rbx, [r13-0x200]"),
    (mov_mr(Reg.RDI, Reg.RAX), "mov [rdi], rax"),
    (mov_mi(Reg.RDI, 0x1234, disp=8), "mov qword [rdi+0x8], 0x1234"),
    (mov_ri(Reg.RDX, 0x11223344), "mov rdx, 0x11223344"),
    (mov_ri_modrm(Reg.RBX, 0x55), "mov rbx, 0x55"),
    (alu_rr("add", Reg.RCX, Reg.RBX), "add rcx, rbx"),
    (alu_rm("sub", Reg.RSI, Reg.RBP), "sub rsi, [rbp]"),
    (alu_mr("add", Reg.RBX, Reg.RAX), "add [rbx], rax"),
    (alu_ri("xor", Reg.RAX, 0x10), "xor rax, 0x10"),
    (alu_mi("or", Reg.RCX, 0x7F), "or qword [rcx], 0x7f"),
    (imul_rr(Reg.RAX, Reg.RBX), "imul rax, rbx"),
    (imul_rm(Reg.RAX, Reg.RCX), "imul rax, [rcx]"),
    (enc_test_rr(Reg.RAX, Reg.RAX), "test rax, rax"),
    (xchg_rr(Reg.RSP, Reg.RAX), "xchg rsp, rax"),
    (xchg_rax(Reg.RBX), "xchg rax, rbx"),
    (push_r(Reg.R12), "push r12"),
    (pop_r(Reg.R12), "pop r12"),
    (inc_r(Reg.RAX), "inc rax"),
    (dec_m(Reg.RBX), "dec qword [rbx]"),
    (neg_r(Reg.RCX), "neg rcx"),
    (not_r(Reg.RDX), "not rdx"),
    (shl_ri(Reg.RAX, 4), "shl rax, 0x4"),
    (shr_cl(Reg.RBX), "shr rbx, cl"),
    (shl_mi(Reg.RCX, 1), "shl qword [rcx], 0x1"),
    (lea(Reg.RAX, Reg.RBX, disp=0x40), "lea rax, [rbx+0x40]"),
    (nop(), "nop"),
    (leave(), "leave"),
    (ret(), "ret"),
    (ret_imm(8), "ret 0x8"),
    (call_r(Reg.RDI), "call rdi"),
    (jmp_r(Reg.RSI), "jmp rsi"),
    (call_m(Reg.RAX, disp=0x18), "call qword [rax+0x18]"),
    (jmp_m(Reg.RBX), "jmp qword [rbx]"),
    (call_rip(0x2000), "call qword [rip+0x2000]"),
    (jmp_rip(-0x800), "jmp qword [rip-0x800]"),
    (syscall(), "syscall"),
    (sysenter(), "sysenter"),
    (int_n(0x21), "int 0x21"),
    (int80(), "int 0x80"),
    (gs_call(), "call gs:[0x10]"),
]


@pytest.mark.parametrize(
    "raw,text", RENDER_TABLE, ids=[t for _, t in RENDER_TABLE]
)
def test_decode_render(raw, text):
    insn = decode(raw, 0x1000)
    assert insn is not None
    assert insn.render() == text
    assert insn.length == len(raw)
    assert insn.raw == raw
    assert insn.addr == 0x1000


def test_branch_targets_are_absolute():
    assert decode(call_rel32(0x100), 0x1000).branch_target == 0x1105
    assert decode(jmp_rel32(-0x20), 0x1000).branch_target == 0xFE5
    assert decode(jmp_rel8(-2), 0x1000).branch_target == 0x1000
    jcc = decode(jcc_rel8(0x4, 5), 0x1000)
    assert jcc.branch_target == 0x1007
    assert jcc.cc == 0x4
    assert decode(jcc_rel32(0x5, 0x100), 0x1000).branch_target == 0x1106
    # register-indirect branches have no static target
    assert decode(jmp_r(Reg.RSI), 0).branch_target is None


@pytest.mark.parametrize(
    "raw,reads,writes,access",
    [
        (mov_rm(Reg.RAX, Reg.RDX), {Reg.RDX}, {Reg.RAX}, MemAccess.LOAD),
        (mov_mr(Reg.RDI, Reg.RAX), {Reg.RDI, Reg.RAX}, set(),
         MemAccess.STORE),
        (mov_rr(Reg.RAX, Reg.RBX), {Reg.RBX}, {Reg.RAX}, MemAccess.NONE),
        (mov_ri(Reg.RAX, 7), set(), {Reg.RAX}, MemAccess.NONE),
        (pop_r(Reg.RBX), {Reg.RSP}, {Reg.RBX, Reg.RSP}, MemAccess.LOAD),
        (push_r(Reg.R12), {Reg.R12, Reg.RSP}, {Reg.RSP}, MemAccess.STORE),
        (xchg_rr(Reg.RSP, Reg.RAX), {Reg.RSP, Reg.RAX},
         {Reg.RSP, Reg.RAX}, MemAccess.NONE),
        (enc_test_rr(Reg.RAX, Reg.RAX), {Reg.RAX}, set(), MemAccess.NONE),
        (alu_ri("cmp", Reg.RBX, 1), {Reg.RBX}, set(), MemAccess.NONE),
        (shr_cl(Reg.RBX), {Reg.RBX, Reg.RCX}, {Reg.RBX}, MemAccess.NONE),
        (lea(Reg.RAX, Reg.RBX, disp=0x40), {Reg.RBX}, {Reg.RAX},
         MemAccess.NONE),
        (leave(), {Reg.RBP, Reg.RSP}, {Reg.RBP, Reg.RSP}, MemAccess.LOAD),
        (ret(), {Reg.RSP}, {Reg.RSP}, MemAccess.LOAD),
        (call_r(Reg.RDI), {Reg.RDI, Reg.RSP}, {Reg.RSP}, MemAccess.STORE),
    ],
)
def test_register_effects(raw, reads, writes, access):
    insn = decode(raw, 0)
    assert insn.reads == frozenset(reads)
    assert insn.writes == frozenset(writes)
    assert insn.mem_access is access


def test_stream_terminators():
    ends = [ret(), ret_imm(4), jmp_rel32(0), jmp_r(Reg.RAX), syscall(),
            sysenter(), int80(), int_n(0x21)]
    flows = [call_rel32(0), call_r(Reg.RDI), gs_call(), jcc_rel8(0, 2),
             nop(), mov_rr(Reg.RAX, Reg.RBX)]
    for raw in ends:
        assert decode(raw, 0).is_terminator, raw.hex()
    for raw in flows:
        assert not decode(raw, 0).is_terminator, raw.hex()


def test_poison_byte_is_invalid():
    assert decode(b"\x06", 0) is None
    assert decode(b"\x06\x90", 0) is None


@given(st.binary(min_size=1, max_size=24))
@settings(max_examples=400)
def test_decode_total_and_bounded(data):
    insn = decode(data, 0x7000)
    if insn is not None:
        assert 1 <= insn.length <= len(data)
        assert insn.raw == data[: insn.length]
        assert insn.addr == 0x7000


@given(st.binary(min_size=1, max_size=64))
@settings(max_examples=200)
def test_linear_walk_terminates(data):
    off = 0
    while off < len(data):
        insn = decode(data[off:], off)
        off += 1 if insn is None else insn.length
    assert off >= len(data)


def _page_of(image, base=BASE):
    return image.page_at(base)


def test_page_disasm_follows_fallthrough_and_stops_at_ret():
    code = asm(mov_rr(Reg.RAX, Reg.RBX), ret(), nop())  # nop unreachable
    image = code_image(code)
    pd = PageDisasm(_page_of(image))
    assert pd.add_entries([BASE]) == 2
    assert [i.render() for i in pd.instructions()] == ["mov rax, rbx", "ret"]
    # re-adding a known entry discovers nothing new
    assert pd.add_entries([BASE]) == 0


def test_page_disasm_follows_in_page_direct_branch():
    # jcc hops over a gap of poison; target decodes, the gap does not.
    code = asm(jcc_rel8(0x4, 2), b"\x06\x06", mov_rr(Reg.RCX, Reg.RDX), ret())
    image = code_image(code)
    insns = disassemble_page(_page_of(image), [BASE])
    rendered = [i.render() for i in insns]
    assert rendered == ["je " + hex(BASE + 4), "mov rcx, rdx", "ret"]


def test_page_disasm_incremental_entries():
    part1 = asm(nop(), ret())
    part2 = asm(pop_r(Reg.RBX), ret())
    code = part1 + part2
    image = code_image(code)
    pd = PageDisasm(_page_of(image))
    assert pd.add_entries([BASE]) == 2
    assert pd.add_entries([BASE + len(part1)]) == 2
    assert len(pd.instructions()) == 4
    ordered = [i.addr for i in pd.instructions()]
    assert ordered == sorted(ordered)


def test_page_disasm_rejects_foreign_entries():
    image = code_image(asm(ret()))
    pd = PageDisasm(_page_of(image))
    with pytest.raises(ValueError):
        pd.add_entries([BASE + 0x5000])


def test_page_disasm_requires_executable_page():
    builder = ImageBuilder()
    builder.put(0x900000, b"\xc3", perms=RO, tag=SegmentTag.DATA)
    page = builder.build().page_at(0x900000)
    with pytest.raises(ValueError):
        PageDisasm(page)


def test_chain_targets_direct_and_conditional():
    code = asm(
        call_rel32(0x100),
        jcc_rel32(0x4, 0x200),
        jmp_rel32(0x300),
    )
    image = code_image(code)
    insns = decode_stream(code)
    with_cond = extract_chain_targets(insns, image, include_cond=True)
    without = extract_chain_targets(insns, image, include_cond=False)
    jcc_target = insns[1].branch_target
    assert insns[0].branch_target in with_cond
    assert insns[2].branch_target in with_cond
    assert jcc_target in with_cond
    assert jcc_target not in without
    assert len(without) == 2


def test_chain_targets_read_rip_relative_slots():
    slot_addr = BASE + 0x1000  # RO data page next door
    fn_target = 0x555000

    call_insn_len = len(call_rip(0))
    code_addr = BASE
    disp = slot_addr - (code_addr + call_insn_len)
    code = asm(call_rip(disp), ret())

    builder = ImageBuilder()
    builder.put(BASE, code, perms=RX, tag=SegmentTag.CODE, fill=0x06)
    builder.put(slot_addr, fn_target.to_bytes(8, "little"), perms=RO,
                tag=SegmentTag.DATA)
    builder.put(fn_target, asm(ret()), perms=RX, tag=SegmentTag.CODE)
    image = builder.build()

    insns = decode_stream(code)
    targets = extract_chain_targets(insns, image)
    assert fn_target in targets


def test_chain_targets_skip_unmapped_slot():
    disp = 0x100000  # points into unmapped space
    code = asm(call_rip(disp), ret())
    image = code_image(code)
    targets = extract_chain_targets(decode_stream(code), image)
    assert targets == frozenset()
