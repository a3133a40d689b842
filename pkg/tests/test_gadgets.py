"""Window classification, footprints, mining policy, and set coverage."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import asm, decode_stream, gadget_multiset
from ropscope.disasm import Reg
from ropscope.encode import (
    alu_mr,
    alu_ri,
    alu_rm,
    alu_rr,
    call_m,
    call_r,
    call_rel32,
    gs_call,
    jcc_rel8,
    jmp_m,
    jmp_r,
    jmp_rel8,
    jmp_rel32,
    lea,
    mov_mi,
    mov_mr,
    mov_ri,
    mov_rm,
    mov_rr,
    nop,
    pop_r,
    push_r,
    ret,
    ret_imm,
    shl_cl,
    syscall,
    xchg_rr,
)
from ropscope.gadgets import (
    BUILTIN_SETS,
    HEURISTIC_TYPES,
    TC_CATEGORIES,
    TC_TYPES,
    Footprint,
    GadgetSetSpec,
    GadgetType,
    MiningOptions,
    category_counts,
    classify,
    evaluate_set,
    find_gadgets,
    gadget_report_csv,
    gadget_report_json,
    gadget_report_rows,
    leaked_types,
    load_set_spec,
    locate_sys_anchors,
    resolve_set,
)

MIN = Footprint.MIN_FP
EX = Footprint.EX_FP

BROP_POPS = asm(
    pop_r(Reg.RBX), pop_r(Reg.RBP), pop_r(Reg.R12), pop_r(Reg.R13),
    pop_r(Reg.R14), pop_r(Reg.RSI), pop_r(Reg.R15), pop_r(Reg.RDI),
)

# Minimal exemplar per directly usable type: code bytes -> (type, footprint)
EXEMPLARS = [
    (asm(mov_rr(Reg.RDI, Reg.RAX), ret()), GadgetType.MR, MIN),
    (asm(pop_r(Reg.RBX), ret()), GadgetType.LR, MIN),
    (asm(alu_rr("add", Reg.RCX, Reg.RBX), ret()), GadgetType.AM, MIN),
    (asm(mov_rm(Reg.RAX, Reg.RDX), ret()), GadgetType.LM, MIN),
    (asm(alu_rm("add", Reg.RSI, Reg.RBP), ret()), GadgetType.AM_LD, MIN),
    (asm(mov_mr(Reg.RDI, Reg.RAX), ret()), GadgetType.SM, MIN),
    (asm(alu_mr("sub", Reg.RBX, Reg.RAX, width=32), ret()),
     GadgetType.AM_ST, MIN),
    (asm(shl_cl(Reg.RAX), ret()), GadgetType.LOGIC, MIN),
    (asm(xchg_rr(Reg.RSP, Reg.RAX)), GadgetType.SP, MIN),
    (asm(jmp_r(Reg.RDI)), GadgetType.JMP, MIN),
    (asm(call_r(Reg.RDI)), GadgetType.CALL, MIN),
    (asm(syscall()), GadgetType.SYS, MIN),
    (asm(mov_mr(Reg.RSP, Reg.RSI), call_r(Reg.RDI)), GadgetType.CP, MIN),
    (asm(BROP_POPS, ret()), GadgetType.BROP, MIN),
    (asm(mov_mr(Reg.RDI, Reg.RAX), ret()), GadgetType.ST, MIN),
    (asm(mov_mi(Reg.RDI, 5), ret()), GadgetType.STCONST, MIN),
    (asm(mov_rm(Reg.RAX, Reg.RDX, disp=8), ret()), GadgetType.LMEX, MIN),
    (asm(mov_mr(Reg.RDX, Reg.RAX, disp=8), ret()), GadgetType.STCONSTEX,
     MIN),
    (asm(call_r(Reg.RDI), ret()), GadgetType.CS2, MIN),
    (asm(pop_r(Reg.RBP), call_r(Reg.RDI)), GadgetType.EP, MIN),
    (asm(mov_mr(Reg.RDI, Reg.RAX), call_r(Reg.RSI), jmp_r(Reg.RDX)),
     GadgetType.RF, MIN),
    (asm(jmp_rel8(-2)), GadgetType.STOP, MIN),
    (asm(mov_ri(Reg.RAX, 7), ret()), GadgetType.MR, MIN),
    (asm(pop_r(Reg.RSP), ret()), GadgetType.SP, MIN),
    (asm(syscall(), ret()), GadgetType.SYS, MIN),
    (asm(gs_call(), ret()), GadgetType.SYS, MIN),
]


@pytest.mark.parametrize(
    "code,gtype,footprint",
    EXEMPLARS,
    ids=[f"{t.value}-{i}" for i, (_, t, _f) in enumerate(EXEMPLARS)],
)
def test_exemplar_classification(code, gtype, footprint):
    cls = classify(decode_stream(code))
    assert gtype in cls.types
    assert cls.footprints[gtype] is footprint


EXTENDED_CASES = [
    (asm(nop(), mov_rr(Reg.RDI, Reg.RAX), ret()), GadgetType.MR, EX),
    (asm(mov_rm(Reg.RAX, Reg.RDX, disp=8), ret()), GadgetType.LM, EX),
    (asm(mov_mr(Reg.RDX, Reg.RAX, disp=8), ret()), GadgetType.SM, EX),
    (asm(alu_ri("add", Reg.RSP, 0x10), ret()), GadgetType.SP, EX),
    (asm(jmp_m(Reg.RBX)), GadgetType.JMP, EX),
    (asm(call_m(Reg.RAX, disp=0x18)), GadgetType.CALL, EX),
    (asm(nop(), syscall(), ret()), GadgetType.SYS, EX),
    (asm(mov_rr(Reg.RCX, Reg.RBX), call_r(Reg.RDI)), GadgetType.CALL, EX),
    (asm(pop_r(Reg.RBP), nop(), jmp_r(Reg.RSI)), GadgetType.EP, EX),
    (asm(mov_mr(Reg.RSP, Reg.RSI), call_r(Reg.RDI), nop(), ret()),
     GadgetType.CS2, EX),
    (asm(nop(), nop(), jmp_rel8(-4)), GadgetType.STOP, EX),
]


@pytest.mark.parametrize(
    "code,gtype,footprint",
    EXTENDED_CASES,
    ids=[f"{t.value}-ex{i}" for i, (_, t, _f) in enumerate(EXTENDED_CASES)],
)
def test_extended_footprints(code, gtype, footprint):
    cls = classify(decode_stream(code))
    assert gtype in cls.types
    assert cls.footprints[gtype] is footprint


def test_core_index_picks_match_closest_to_terminator():
    code = asm(
        mov_rr(Reg.RAX, Reg.RBX),
        mov_rr(Reg.RCX, Reg.RDX),
        ret(),
    )
    cls = classify(decode_stream(code))
    assert cls.core_index[GadgetType.MR] == 1


def test_call_bare_memory_is_minimal():
    cls = classify(decode_stream(asm(call_m(Reg.RAX))))
    assert cls.footprints[GadgetType.CALL] is MIN


def test_brop_requires_exact_pop_order():
    scrambled = asm(
        pop_r(Reg.RBP), pop_r(Reg.RBX), pop_r(Reg.R12), pop_r(Reg.R13),
        pop_r(Reg.R14), pop_r(Reg.RSI), pop_r(Reg.R15), pop_r(Reg.RDI),
        ret(),
    )
    assert GadgetType.BROP not in classify(decode_stream(scrambled)).types
    assert GadgetType.BROP in classify(decode_stream(asm(BROP_POPS, ret()))).types


def test_stop_requires_backward_target():
    forward = classify(decode_stream(asm(jmp_rel8(5))))
    assert GadgetType.STOP not in forward.types


def test_ret_terminated_types_need_the_return():
    cls = classify(decode_stream(asm(mov_rr(Reg.RDI, Reg.RAX),
                                     call_r(Reg.RBX))))
    assert GadgetType.MR not in cls.types


def test_heuristic_types_are_gated():
    cs1 = asm(nop(), jcc_rel8(0x4, -3), ret())
    fs = asm(call_rel32(0x40), ret())
    tm = asm(*[nop()] * 19, ret())
    for code, gtype in [
        (cs1, GadgetType.CS1),
        (fs, GadgetType.FS),
        (tm, GadgetType.TM),
    ]:
        insns = decode_stream(code)
        assert gtype not in classify(insns).types
        enabled = classify(insns, enable_heuristic_types=True)
        assert gtype in enabled.types
        assert enabled.footprints[gtype] is EX


def test_classification_is_address_invariant():
    for code, gtype, _fp in EXEMPLARS:
        a = classify(decode_stream(code, base=0x400000))
        b = classify(decode_stream(code, base=0x7F0003000))
        assert a.types == b.types, gtype
        assert a.footprints == b.footprints
        assert a.core_index == b.core_index


@given(st.integers(min_value=0, max_value=13), st.integers(0, 2 ** 40))
@settings(max_examples=60)
def test_classification_is_pure(idx, base_offset):
    code = EXEMPLARS[idx][0]
    insns = decode_stream(code, base=0x1000 + base_offset * 16)
    first = classify(insns)
    second = classify(insns)
    assert first == second


# --- mining ---


def test_mining_emits_every_suffix_window():
    code = asm(mov_rr(Reg.RDI, Reg.RAX), ret())
    insns = decode_stream(code)
    gadgets = find_gadgets(insns)
    assert [(g.addr - insns[0].addr, g.length) for g in gadgets] == [
        (0, 2),
        (len(code) - 1, 1),
    ]


def test_mining_respects_max_len_and_is_monotone():
    code = asm(*[nop()] * 6, ret())
    insns = decode_stream(code)
    short = {(g.addr, g.length) for g in
             find_gadgets(insns, MiningOptions(max_len=3))}
    full = {(g.addr, g.length) for g in
            find_gadgets(insns, MiningOptions(max_len=8))}
    assert max(length for _, length in short) == 3
    assert short <= full
    assert len(full) == 7


def test_mining_stops_at_control_flow_blockers():
    code = asm(pop_r(Reg.RBX), ret(), mov_rr(Reg.RDI, Reg.RAX), ret())
    insns = decode_stream(code)
    gadgets = find_gadgets(insns)
    # No window may span the first return.
    for g in gadgets:
        mid_rets = [i for i in g.insns[:-1] if i.mnemonic.name.startswith("RET")]
        assert not mid_rets
    second_ret_windows = [g for g in gadgets if g.terminator.addr == insns[-1].addr]
    assert sorted(g.length for g in second_ret_windows) == [1, 2]


def test_mining_requires_byte_adjacency():
    chunk1 = asm(mov_rr(Reg.RDI, Reg.RAX))
    chunk2 = asm(ret())
    base = 0x400000
    insns = decode_stream(chunk1, base=base) + decode_stream(
        chunk2, base=base + len(chunk1) + 3
    )
    gadgets = find_gadgets(insns)
    assert all(g.length == 1 for g in gadgets)


def test_mining_calls_do_not_block_windows():
    code = asm(pop_r(Reg.RBX), call_rel32(0x100), ret())
    insns = decode_stream(code)
    lengths = {g.length for g in find_gadgets(insns)}
    assert 3 in lengths  # pop; call; ret mined as one window


def test_jmp_rel_terminators_only_with_heuristics():
    code = asm(nop(), jmp_rel8(-3))
    insns = decode_stream(code)
    plain = find_gadgets(insns)
    assert plain == ()
    fuzzy = find_gadgets(insns, MiningOptions(enable_heuristic_types=True))
    assert any(GadgetType.STOP in g.types for g in fuzzy)


def test_sys_anchor_alignment_rejects_embedded_bytes():
    # The syscall opcode bytes sit inside a mov immediate; only the real
    # syscall instruction may anchor windows.
    code = asm(mov_ri(Reg.RAX, 0x050F), syscall(), ret())
    insns = decode_stream(code)
    anchors = locate_sys_anchors(insns)
    assert anchors == [insns[1].addr]
    gadgets = find_gadgets(insns)
    sys_windows = [g for g in gadgets if GadgetType.SYS in g.types]
    assert sys_windows
    assert all(g.terminator.addr != insns[0].addr for g in gadgets)


def test_sys_anchors_cover_all_entry_kinds():
    from ropscope.encode import int80, sysenter

    code = asm(syscall(), ret(), sysenter(), ret(), int80(), ret(),
               gs_call(), ret())
    insns = decode_stream(code)
    expected = [i.addr for i in insns
                if i.render() in ("syscall", "sysenter", "int 0x80",
                                  "call gs:[0x10]")]
    assert locate_sys_anchors(insns) == expected


def test_gadget_accessors():
    code = asm(pop_r(Reg.RBX), ret())
    insns = decode_stream(code)
    g = find_gadgets(insns)[0]
    assert g.length == 2
    assert g.raw == code
    assert g.end == insns[-1].end
    assert g.terminator.render() == "ret"
    assert g.footprint(GadgetType.LR) is MIN
    assert g.footprint(GadgetType.SYS) is None
    assert g.render() == "pop rbx; ret"


def test_untyped_windows_are_still_reported():
    code = asm(push_r(Reg.RAX), ret())
    insns = decode_stream(code)
    gadgets = find_gadgets(insns)
    untyped = [g for g in gadgets if not g.types]
    assert untyped  # push has no core match but the window exists


# --- gadget sets and reports ---


def test_builtin_sets():
    assert set(BUILTIN_SETS) == {"tc", "priority", "movtc"}
    assert frozenset(BUILTIN_SETS["tc"].required) == TC_TYPES
    assert len(BUILTIN_SETS["tc"].required) == 11
    assert len(BUILTIN_SETS["priority"].required) == 10
    assert len(BUILTIN_SETS["movtc"].required) == 7
    for spec in BUILTIN_SETS.values():
        assert not set(spec.required) & HEURISTIC_TYPES
    assert resolve_set("tc") is BUILTIN_SETS["tc"]
    with pytest.raises(ValueError):
        resolve_set("nope")


def test_tc_categories_partition_the_tc_set():
    members = [t for types in TC_CATEGORIES.values() for t in types]
    assert len(members) == len(set(members)) == 11
    assert frozenset(members) == TC_TYPES
    assert len(TC_CATEGORIES) == 7


def test_set_spec_validation():
    with pytest.raises(ValueError):
        GadgetSetSpec("dup", (GadgetType.LR, GadgetType.LR))
    with pytest.raises(ValueError):
        GadgetSetSpec("empty", ())


def test_load_set_spec_round_trip(tmp_path):
    path = tmp_path / "set.json"
    path.write_text(json.dumps({"name": "mine", "types": ["LR", "SYS"]}))
    spec = load_set_spec(path)
    assert spec.name == "mine"
    assert spec.required == (GadgetType.LR, GadgetType.SYS)

    path.write_text(json.dumps({"name": "bad", "types": ["NOPE"]}))
    with pytest.raises(ValueError):
        load_set_spec(path)
    path.write_text(json.dumps(["not", "an", "object"]))
    with pytest.raises(ValueError):
        load_set_spec(path)


def test_evaluate_set_counts_and_convergence():
    code = asm(
        pop_r(Reg.RBX), ret(),
        mov_rr(Reg.RDI, Reg.RAX), ret(),
        nop(), pop_r(Reg.RCX), ret(),
    )
    gadgets = find_gadgets(decode_stream(code))
    spec = GadgetSetSpec("pair", (GadgetType.LR, GadgetType.MR))
    report = evaluate_set(gadgets, spec)
    assert report.converged
    assert report.converged_min_fp
    assert report.missing() == ()
    assert report.counts[GadgetType.LR].min_fp == 2
    # nop; pop rcx; ret also hits LR in extended form
    assert report.counts[GadgetType.LR].ex_fp == 1
    assert report.counts[GadgetType.MR].min_fp == 1

    wider = GadgetSetSpec("trio", (GadgetType.LR, GadgetType.MR,
                                   GadgetType.SYS))
    report2 = evaluate_set(gadgets, wider)
    assert not report2.converged
    assert report2.missing() == (GadgetType.SYS,)
    assert report2.to_dict()["types"]["SYS"] == {"min_fp": 0, "ex_fp": 0}


def test_leaked_types_and_categories():
    code = asm(mov_rm(Reg.RAX, Reg.RDX), ret(), jmp_r(Reg.RDI))
    gadgets = find_gadgets(decode_stream(code))
    types = leaked_types(gadgets)
    assert GadgetType.LM in types
    assert GadgetType.JMP in types
    cats = category_counts(gadgets)
    assert cats["memory"].total >= 1
    assert cats["control_flow"].min_fp >= 1


def test_gadget_reports():
    code = asm(pop_r(Reg.RBX), ret())
    gadgets = find_gadgets(decode_stream(code))
    rows = gadget_report_rows(gadgets)
    assert len(rows) == len(gadgets)
    assert rows[0]["text"] == "pop rbx; ret"

    csv_text = gadget_report_csv(gadgets)
    lines = csv_text.strip().splitlines()
    assert lines[0].startswith("addr,")
    assert len(lines) == len(gadgets) + 1

    parsed = json.loads(gadget_report_json(gadgets))
    assert len(parsed["gadgets"]) == len(gadgets)
    assert parsed["gadgets"][0]["text"] == "pop rbx; ret"


def test_gadget_multiset_helper_is_order_insensitive():
    code = asm(pop_r(Reg.RBX), ret())
    gadgets = find_gadgets(decode_stream(code))
    assert gadget_multiset(gadgets) == gadget_multiset(reversed(gadgets))
