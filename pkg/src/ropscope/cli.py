"""Command-line interface.

Subcommands cover the full measurement workflow: harvest a snapshot from a
leaked pointer, mine and classify gadgets offline, compute rerandomization
upper bounds, assess register corruption, scan data memory for code
pointers, generate synthetic corpora, and compare rerandomization schemes
over a corpus manifest.

Reports are emitted as canonical JSON (sorted keys, no whitespace) so
identical inputs produce byte-identical output; --pretty switches to
human-readable tables.

Exit codes: 0 on success, 1 for input/output and parse failures, 2 for
domain errors such as invalid start pointers or malformed options.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from ropscope.gadgets import (
    BUILTIN_SETS,
    Footprint,
    GadgetSetSpec,
    GadgetType,
    category_counts,
    evaluate_set,
    gadget_report_csv,
    gadget_report_json,
    load_set_spec,
)
from ropscope.harvest import (
    HarvestOptions,
    StartPointerInvalid,
    harvest,
    mine_image,
    page_start_pointers,
)
from ropscope.ptrscan import scan_pointers
from ropscope.quality import (
    assess_gadgets,
    corruption_report_csv,
    summarize_by_type,
    verdict_report_csv,
)
from ropscope.rerand import evaluate_interval, upper_bound
from ropscope.snapshot import (
    MemoryImage,
    SegmentTag,
    SnapshotError,
    load_elf,
    load_snapshot,
    save_snapshot,
)
from ropscope.synth import (
    GenParams,
    RandomizationScheme,
    SchemeKind,
    apply_scheme,
    generate,
    materialize,
)

_TYPE_BY_VALUE = {t.value: t for t in GadgetType}


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _default_seed() -> int:
    return int(os.environ.get("ROPSCOPE_SEED", "0"))


def _parse_int(text: str) -> int:
    return int(text, 0)


def _parse_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition(":")
    if not sep:
        raise ValueError(f"range must look like LO:HI, got {text!r}")
    return _parse_int(lo), _parse_int(hi)


def _parse_types(text: str) -> list[GadgetType]:
    out = []
    for name in text.split(","):
        name = name.strip()
        if name not in _TYPE_BY_VALUE:
            raise ValueError(f"unknown gadget type {name!r}")
        out.append(_TYPE_BY_VALUE[name])
    return out


def _load_image(path: str) -> MemoryImage:
    if path.endswith(".rsnp"):
        return load_snapshot(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"\x7fELF":
        return load_elf(path)
    return load_snapshot(path)


def _resolve_set(args) -> GadgetSetSpec | None:
    if getattr(args, "set_file", None):
        return load_set_spec(args.set_file)
    if getattr(args, "set_name", None):
        if args.set_name not in BUILTIN_SETS:
            raise ValueError(
                f"unknown gadget set {args.set_name!r}; "
                f"built-ins: {', '.join(sorted(BUILTIN_SETS))}"
            )
        return BUILTIN_SETS[args.set_name]
    return None


def _harvest_options(args, track: GadgetSetSpec | None) -> HarvestOptions:
    return HarvestOptions(
        seed=args.seed,
        follow_cond_branches=not getattr(args, "no_cond", False),
        max_gadget_len=getattr(args, "max_len", 5),
        enable_heuristic_types=getattr(args, "heuristic_types", False),
        track_set=track,
        stop_on_convergence=getattr(args, "stop_on_convergence", False),
        start_strategy=getattr(args, "start_strategy", "lowest"),
    )


# Subcommand handlers. Each returns a process exit code.


def _cmd_harvest(args) -> int:
    image = _load_image(args.snapshot)
    spec = _resolve_set(args)
    opts = _harvest_options(args, spec)
    trace = harvest(image, args.start, opts)
    if args.trace:
        Path(args.trace).write_text(trace.to_jsonl())
    summary = {
        "start": f"{trace.start:#x}",
        "pages_found": trace.pages_found,
        "leak_cost": trace.leak_cost,
        "analysis_cost": trace.analysis_cost,
        "total_cost": trace.total_cost,
        "skipped_targets": trace.skipped_targets,
        "gadgets": len(trace.gadgets),
        "converged": trace.converged,
        "convergence_clock": trace.convergence_clock(),
        "type_clocks": {
            t.value: c for t, c in sorted(
                trace.type_clocks().items(), key=lambda kv: kv[0].value
            )
        },
    }
    if args.pretty:
        print(f"start             {summary['start']}")
        print(f"pages found       {summary['pages_found']}")
        print(f"leak cost         {summary['leak_cost']}")
        print(f"analysis cost     {summary['analysis_cost']}")
        print(f"total cost        {summary['total_cost']}")
        print(f"skipped targets   {summary['skipped_targets']}")
        print(f"gadgets           {summary['gadgets']}")
        print(f"converged         {summary['converged']}")
        if summary["type_clocks"]:
            print("type availability clocks:")
            for name, clock in summary["type_clocks"].items():
                print(f"  {name:10s} {clock}")
    else:
        print(_canonical(summary))
    return 0


def _cmd_gadgets(args) -> int:
    image = _load_image(args.snapshot)
    spec = _resolve_set(args)
    opts = _harvest_options(args, spec)
    gadgets = mine_image(image, opts)
    if args.format == "csv":
        text = gadget_report_csv(gadgets)
    else:
        payload = json.loads(gadget_report_json(gadgets))
        if spec is not None:
            payload["coverage"] = evaluate_set(gadgets, spec).to_dict()
        text = _canonical(payload)
    if args.out:
        Path(args.out).write_text(text if text.endswith("\n") else text + "\n")
    if args.pretty:
        counts: dict[str, int] = {}
        for g in gadgets:
            for t in g.types:
                counts[t.value] = counts.get(t.value, 0) + 1
        print(f"gadgets mined: {len(gadgets)}")
        for name in sorted(counts):
            print(f"  {name:10s} {counts[name]}")
        if spec is not None:
            report = evaluate_set(gadgets, spec)
            print(
                f"set {spec.name}: converged={report.converged} "
                f"min-footprint-only={report.converged_min_fp}"
            )
    elif not args.out:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return 0


def _cmd_upper_bound(args) -> int:
    image = _load_image(args.snapshot)
    spec = _resolve_set(args) or BUILTIN_SETS["tc"]
    opts = _harvest_options(args, spec)
    report = upper_bound(image, spec, opts)
    payload = report.to_dict()
    if args.interval is not None:
        verdict = evaluate_interval(args.interval, report=report)
        payload["interval_verdict"] = {
            "interval": args.interval,
            "safety": verdict.value,
            "minimum_clock": report.minimum_clock,
        }
    if args.timeline_csv:
        Path(args.timeline_csv).write_text(report.timeline_csv())
    if args.pretty:
        print(f"set                 {report.spec_name}")
        print(f"starts              {len(report.per_start)}")
        print(f"converged starts    {report.converged_count}")
        print(f"minimum clock       {report.minimum_clock}")
        print(f"average clock       {report.average_clock}")
        for lo, hi in report.non_reactive_intervals:
            print(f"  non-reactive [{lo}, {hi})")
        if args.interval is not None:
            print(f"interval {args.interval}: {verdict.value}")
    else:
        print(_canonical(payload))
    return 0


def _cmd_corrupt(args) -> int:
    image = _load_image(args.snapshot)
    opts = _harvest_options(args, None)
    gadgets = mine_image(image, opts)
    types = _parse_types(args.types) if args.types else None
    verdicts = assess_gadgets(gadgets, types)
    if args.format == "verdicts":
        sys.stdout.write(verdict_report_csv(verdicts))
        return 0
    summaries = summarize_by_type(verdicts)
    if args.format == "json":
        payload = {
            t.value: {
                "assessed": s.assessed,
                "corrupted": s.corrupted,
                "rate": s.rate_float,
                "mean_unique_registers": s.mean_unique_registers,
            }
            for t, s in summaries.items()
        }
        print(_canonical(payload))
    else:
        sys.stdout.write(corruption_report_csv(summaries))
    return 0


_TAG_NAMES = {t.name.lower(): t for t in SegmentTag}


def _cmd_scan(args) -> int:
    image = _load_image(args.snapshot)
    tags = None
    if args.segment:
        tags = []
        for name in args.segment.split(","):
            name = name.strip().lower()
            if name not in _TAG_NAMES:
                raise ValueError(f"unknown segment tag {name!r}")
            tags.append(_TAG_NAMES[name])
    lib_range = _parse_range(args.lib_range) if args.lib_range else None
    report = scan_pointers(
        image,
        tags=tags,
        lib_range=lib_range,
        alignment=args.alignment,
        require_executable_target=not args.any_target,
    )
    if args.format == "csv":
        sys.stdout.write(report.to_csv())
    else:
        print(_canonical(report.to_dict()))
    return 0


def _write_corpus_entry(
    out_dir: Path,
    name: str,
    image,
    truth,
    scheme: RandomizationScheme | None,
) -> dict:
    snap = out_dir / f"{name}.rsnp"
    truth_path = out_dir / f"{name}.truth.json"
    save_snapshot(image, snap)
    truth_path.write_text(_canonical(truth.to_dict()) + "\n")
    return {
        "name": name,
        "scheme": None if scheme is None else scheme.to_dict(),
        "snapshot_path": snap.name,
        "ground_truth_path": truth_path.name,
    }


def _cmd_synth_generate(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = GenParams(
        n_functions=args.functions,
        mean_fn_len=args.mean_len,
        connectivity=args.connectivity,
        ensure_strongly_connected=not args.no_strongly_connected,
        max_functions_per_page=args.max_functions_per_page,
        base=args.base,
    )
    program = generate(params, args.seed)
    entries = []
    image, truth = materialize(program)
    entries.append(_write_corpus_entry(out_dir, "baseline", image, truth, None))
    for kind_name in (args.schemes.split(",") if args.schemes else []):
        kind = SchemeKind(kind_name.strip())
        scheme = RandomizationScheme(
            kind=kind,
            seed=args.scheme_seed,
            rename_registers=args.rename_registers
            and kind is SchemeKind.FUNCTION,
        )
        image_s, truth_s = apply_scheme(program, scheme)
        entries.append(
            _write_corpus_entry(out_dir, kind.value, image_s, truth_s, scheme)
        )
    manifest = {
        "seed": args.seed,
        "params": params.to_dict(),
        "entries": entries,
    }
    (out_dir / "manifest.json").write_text(_canonical(manifest) + "\n")
    print(_canonical({"out_dir": str(out_dir), "entries": len(entries)}))
    return 0


def _load_manifest(path: str) -> tuple[Path, dict]:
    manifest_path = Path(path)
    data = json.loads(manifest_path.read_text())
    if "seed" not in data or "params" not in data or "entries" not in data:
        raise ValueError("manifest needs seed, params, and entries")
    return manifest_path.parent, data


def _cmd_synth_transform(args) -> int:
    base_dir, manifest = _load_manifest(args.manifest)
    params = GenParams.from_dict(manifest["params"])
    program = generate(params, int(manifest["seed"]))
    kind = SchemeKind(args.scheme)
    scheme = RandomizationScheme(
        kind=kind,
        seed=args.scheme_seed,
        rename_registers=args.rename_registers,
    )
    image, truth = apply_scheme(program, scheme)
    name = args.name or (
        f"{kind.value}-s{args.scheme_seed}"
        + ("-renamed" if args.rename_registers else "")
    )
    entry = _write_corpus_entry(base_dir, name, image, truth, scheme)
    manifest["entries"] = [
        e for e in manifest["entries"] if e.get("name") != name
    ] + [entry]
    Path(args.manifest).write_text(_canonical(manifest) + "\n")
    print(_canonical({"name": name, "snapshot_path": entry["snapshot_path"]}))
    return 0


def _min_fp_labels(gadgets) -> int:
    return sum(
        1
        for g in gadgets
        for t in g.types
        if g.footprints[t] is Footprint.MIN_FP
    )


def _entry_stats(image, opts) -> dict:
    gadgets = mine_image(image, opts)
    per_type: dict[str, dict[str, int]] = {}
    for g in gadgets:
        for t in g.types:
            slot = per_type.setdefault(t.value, {"min_fp": 0, "ex_fp": 0})
            if g.footprints[t] is Footprint.MIN_FP:
                slot["min_fp"] += 1
            else:
                slot["ex_fp"] += 1
    cats = category_counts(gadgets)
    tc = evaluate_set(gadgets, BUILTIN_SETS["tc"])
    return {
        "gadgets": len(gadgets),
        "min_fp_labels": _min_fp_labels(gadgets),
        "types": per_type,
        "categories": {
            name: {"min_fp": c.min_fp, "ex_fp": c.ex_fp}
            for name, c in cats.items()
        },
        "tc_preserved": tc.converged,
        "tc_preserved_min_fp": tc.converged_min_fp,
    }


def _cmd_compare(args) -> int:
    base_dir, manifest = _load_manifest(args.manifest)
    wanted = (
        {n.strip() for n in args.schemes.split(",")} if args.schemes else None
    )
    opts = HarvestOptions(max_gadget_len=args.max_len)
    results: dict[str, dict] = {}
    baseline: dict | None = None
    for entry in manifest["entries"]:
        name = entry["name"]
        if name != "baseline" and wanted is not None and name not in wanted:
            continue
        image = load_snapshot(base_dir / entry["snapshot_path"])
        stats = _entry_stats(image, opts)
        results[name] = stats
        if name == "baseline":
            baseline = stats
    if baseline is not None:
        base_min = baseline["min_fp_labels"]
        for name, stats in results.items():
            if base_min > 0:
                stats["min_fp_reduction_pct"] = round(
                    100.0 * (base_min - stats["min_fp_labels"]) / base_min, 4
                )
            else:
                stats["min_fp_reduction_pct"] = 0.0
    if args.pretty:
        for name, stats in results.items():
            print(
                f"{name:14s} gadgets={stats['gadgets']:5d} "
                f"min-fp={stats['min_fp_labels']:4d} "
                f"reduction={stats.get('min_fp_reduction_pct', 0.0):7.2f}% "
                f"tc={'yes' if stats['tc_preserved'] else 'no'}"
            )
    else:
        print(_canonical(results))
    return 0


def _cmd_starts(args) -> int:
    image = _load_image(args.snapshot)
    opts = _harvest_options(args, None)
    starts = page_start_pointers(image, opts)
    payload = {f"{base:#x}": f"{ptr:#x}" for base, ptr in sorted(starts.items())}
    print(_canonical(payload))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ropscope",
        description=(
            "Measure code-reuse exposure: harvest code pages from a leaked "
            "pointer, classify gadgets, and evaluate rerandomization."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_set=True):
        p.add_argument("--seed", type=_parse_int, default=_default_seed())
        p.add_argument("--max-len", type=int, default=5,
                       help="max instructions per gadget window")
        p.add_argument("--heuristic-types", action="store_true",
                       help="also match structurally fuzzy gadget types")
        if with_set:
            g = p.add_mutually_exclusive_group()
            g.add_argument("--set", dest="set_name", metavar="NAME",
                           help="built-in gadget set: tc, priority, movtc")
            g.add_argument("--set-file", metavar="PATH",
                           help="JSON file with a custom gadget set")

    p = sub.add_parser("harvest", help="recursively harvest from a pointer")
    p.add_argument("snapshot")
    p.add_argument("--start", type=_parse_int, required=True,
                   help="leaked code pointer to start from")
    p.add_argument("--no-cond", action="store_true",
                   help="do not follow conditional branch targets")
    p.add_argument("--stop-on-convergence", action="store_true")
    p.add_argument("--trace", metavar="PATH",
                   help="write the event trace as JSON lines")
    p.add_argument("--pretty", action="store_true")
    add_common(p)
    p.set_defaults(func=_cmd_harvest)

    p = sub.add_parser("gadgets", help="mine and classify a whole image")
    p.add_argument("snapshot")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", metavar="PATH", help="write report to a file")
    p.add_argument("--pretty", action="store_true")
    add_common(p)
    p.set_defaults(func=_cmd_gadgets)

    p = sub.add_parser(
        "upper-bound",
        help="convergence time from every start; interval guidance",
    )
    p.add_argument("snapshot")
    p.add_argument("--interval", type=_parse_int, default=None,
                   help="judge this rerandomization interval (clock ticks)")
    p.add_argument("--timeline-csv", default=None, metavar="PATH",
                   help="write per-start (clock, types) timeline rows here")
    p.add_argument("--start-strategy", choices=("lowest", "seeded"),
                   default="lowest")
    p.add_argument("--pretty", action="store_true")
    add_common(p)
    p.set_defaults(func=_cmd_upper_bound)

    p = sub.add_parser("corrupt", help="register corruption analysis")
    p.add_argument("snapshot")
    p.add_argument("--types", metavar="A,B,...",
                   help="restrict to these gadget types")
    p.add_argument("--format", choices=("csv", "json", "verdicts"),
                   default="csv")
    add_common(p, with_set=False)
    p.set_defaults(func=_cmd_corrupt)

    p = sub.add_parser("scan", help="scan data memory for code pointers")
    p.add_argument("snapshot")
    p.add_argument("--segment", metavar="TAG,...",
                   help="segments to scan: stack, heap, data, other")
    p.add_argument("--lib-range", metavar="LO:HI",
                   help="count only pointers into this address range")
    p.add_argument("--alignment", type=int, default=8)
    p.add_argument("--any-target", action="store_true",
                   help="count pointers to non-executable memory too")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=_cmd_scan)

    p = sub.add_parser("starts", help="chosen start pointer per page")
    p.add_argument("snapshot")
    p.add_argument("--start-strategy", choices=("lowest", "seeded"),
                   default="lowest")
    add_common(p, with_set=False)
    p.set_defaults(func=_cmd_starts)

    p_synth = sub.add_parser("synth", help="synthetic corpus tools")
    synth_sub = p_synth.add_subparsers(dest="synth_command", required=True)

    p = synth_sub.add_parser("generate", help="generate a corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=_parse_int, default=_default_seed())
    p.add_argument("--functions", type=int, default=12)
    p.add_argument("--mean-len", type=int, default=10)
    p.add_argument("--connectivity", type=float, default=0.25)
    p.add_argument("--max-functions-per-page", type=int, default=None)
    p.add_argument("--no-strongly-connected", action="store_true")
    p.add_argument("--base", type=_parse_int, default=0x400000)
    p.add_argument("--schemes", metavar="KIND,...",
                   help="also emit these layouts: coarse, function, "
                        "block, instruction")
    p.add_argument("--scheme-seed", type=_parse_int, default=1)
    p.add_argument("--rename-registers", action="store_true",
                   help="rename registers under the function scheme")
    p.set_defaults(func=_cmd_synth_generate)

    p = synth_sub.add_parser(
        "transform",
        help="re-derive the program from a manifest and apply a scheme",
    )
    p.add_argument("--manifest", required=True)
    p.add_argument("--scheme", required=True,
                   choices=tuple(k.value for k in SchemeKind))
    p.add_argument("--scheme-seed", type=_parse_int, default=1)
    p.add_argument("--rename-registers", action="store_true")
    p.add_argument("--name", help="entry name (default derived)")
    p.set_defaults(func=_cmd_synth_transform)

    p = sub.add_parser("compare", help="compare schemes over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--schemes", metavar="NAME,...",
                   help="manifest entries to include (baseline always)")
    p.add_argument("--max-len", type=int, default=5)
    p.add_argument("--pretty", action="store_true")
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SnapshotError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (StartPointerInvalid, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:  # pragma: no cover - thin wrapper
    raise SystemExit(main())


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
