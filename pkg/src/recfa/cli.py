"""``recfa`` command line: analyze, attest, verify, bench, gen-corpus."""

from __future__ import annotations

import argparse
import json
import random
import sys
import time
from pathlib import Path

from .analysis import analyze_recursions, detect_loops
from .bench import measure, render_table
from .callsite import SkipMap, build_abstract_graph, build_skip_map, compute_skippable, direct_call_sites
from .condenser import (
    DEFAULT_BOUND, STORE, ZLIB, ReportError, bound_gains, encode_words, greedy_compress, seal, tune_bound,
)
from .corpus import LOOP_FREE, LOOP_HEAVY, GenParams, generate_case, seed_from_env, vary
from .model import ModelError, ProgramModel, load_model, serialize_model
from .policy import ForwardMap, build_forward_map
from .prover import AttackSpec, ExecutionError, FoldError, make_plan, run_prover
from .schedule import Schedule, ScheduleError
from .verifier import VIOLATION, verify_report

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2

SKIP_FILE, FWD_FILE, SCS_FILE, SUMMARY_FILE = "skip.txt", "fwd.txt", "scs.txt", "summary.txt"
PROFILES = {"default": GenParams(), "loop-heavy": LOOP_HEAVY, "loop-free": LOOP_FREE}


class CliError(Exception):
    pass


def _read(path: str | Path) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise CliError(f"{path}: {e.strerror}") from None


def _load_model(path: str) -> ProgramModel:
    try:
        return load_model(_read(path))
    except ModelError as e:
        raise CliError(f"{path}: {e}") from None


def _load_schedule(path: str) -> Schedule:
    try:
        return Schedule.parse(_read(path))
    except ScheduleError as e:
        raise CliError(f"{path}: {e}") from None


def _load_policy(d: str) -> tuple[SkipMap, ForwardMap, frozenset[int]]:
    base = Path(d)
    try:
        M = SkipMap.parse(_read(base / SKIP_FILE))
        F = ForwardMap.parse(_read(base / FWD_FILE))
        scs = frozenset(int(t, 16) for t in _read(base / SCS_FILE).split())
    except ValueError as e:
        raise CliError(f"{d}: {e}") from None
    return M, F, scs


def _parse_attack(spec: str) -> AttackSpec:
    try:
        occ, site, target = spec.split(":")
        return AttackSpec(int(occ), int(site, 16), int(target, 16))
    except ValueError:
        raise argparse.ArgumentTypeError("expected <occurrence>:<site-hex>:<target-hex>") from None


def _bounds(text: str) -> list[int]:
    try:
        out = [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError("expected a comma-separated list of integers") from None
    if not out or min(out) < 2:
        raise argparse.ArgumentTypeError("every BOUND must be at least 2")
    return out


# -- analyze ------------------------------------------------------------------


def cmd_analyze(args) -> int:
    m = _load_model(args.model)
    g = build_abstract_graph(m)
    scs = compute_skippable(g)
    M = build_skip_map(g, scs)
    F = build_forward_map(m, scs)
    loops = detect_loops(m)
    recs = analyze_recursions(m, loops=loops)
    sites = direct_call_sites(m)
    reduction = len(scs) / len(sites) if sites else 0.0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / SKIP_FILE).write_text(M.serialize())
    (out / FWD_FILE).write_text(F.serialize())
    (out / SCS_FILE).write_text("".join(f"{a:x}\n" for a in sorted(scs)))
    lines = [f"direct-calls {len(sites)}", f"skipped {len(scs)}", f"reduction {reduction:.4f}"]
    for lp in loops:
        kind = "loop" if lp.reducible else "irreducible"
        lines.append(f"{kind} {lp.loop_id} {lp.function} header {lp.body_start:x} size {len(lp.body)}")
    for r in recs:
        lines.append(f"recursion {r.function} {'foldable' if r.foldable else 'unfoldable'}")
    (out / SUMMARY_FILE).write_text("\n".join(lines) + "\n")
    print(f"skipped {len(scs)} of {len(sites)} direct calls, reduction {reduction:.4f}")
    return EXIT_OK


# -- attest -------------------------------------------------------------------


def cmd_attest(args) -> int:
    m = _load_model(args.model)
    sched = _load_schedule(args.schedule)
    _, _, scs = _load_policy(args.policy)
    plan = make_plan(m, scs)
    fold = not args.no_fold
    try:
        t0 = time.perf_counter()
        run = run_prover(m, sched, attack=args.attack, fold=fold, plan=plan)
        t1 = time.perf_counter()
        items = greedy_compress(run.events, args.bound)
        data = seal(encode_words(items), ZLIB if args.compressor == "zlib" else STORE, args.bound,
                    len(run.events))
        t2 = time.perf_counter()
        raw = run_prover(m, sched, attack=args.attack, fold=False, plan=plan).events if args.raw_dump else None
    except (ScheduleError, ExecutionError, FoldError) as e:
        raise CliError(f"{args.schedule}: {e}") from None
    except ValueError as e:
        raise CliError(str(e)) from None
    Path(args.output).write_bytes(data)
    if raw is not None:
        Path(args.raw_dump).write_text("".join(f"{e}\n" for e in raw))
    ev_total = run.ev_all
    span = (t1 - t0) + (t2 - t1)
    print(f"ev_total {ev_total}")
    print(f"ev_fold {len(run.events)}")
    print(f"ev_gr {len(items)}")
    print(f"zs {len(data)}")
    print(f"t_instr {t1 - t0:.6f}")
    print(f"t_gr {t2 - t1:.6f}")
    if span > 0:
        print(f"e_speed {ev_total / span:.0f}")
        print(f"d_speed {len(data) / span:.0f}")
    if run.attacked:
        print("attack injected")
    return EXIT_OK


# -- verify -------------------------------------------------------------------


def cmd_verify(args) -> int:
    M, F, _ = _load_policy(args.policy)
    try:
        data = Path(args.report).read_bytes() if args.report != "-" else sys.stdin.buffer.read()
    except OSError as e:
        raise CliError(f"{args.report}: {e.strerror}") from None
    t0 = time.perf_counter()
    try:
        verdict = verify_report(data, F, M, args.abort_on_first, args.depth_limit, args.max_events)
    except ReportError as e:
        print(f"report error: {e}", file=sys.stderr)
        return EXIT_ERROR
    dt = time.perf_counter() - t0
    sys.stdout.write(verdict.render())
    print(f"checked {verdict.events_checked} events in {dt:.6f}s", file=sys.stderr)
    return EXIT_VIOLATION if verdict.status == VIOLATION else EXIT_OK


# -- bench --------------------------------------------------------------------


def _measurements_file(path: str) -> list[tuple[str, dict[int, tuple[float, float]]]]:
    try:
        raw = json.loads(_read(path))
        raw = raw.get("programs", raw)
        return [(name, {int(b): (float(v[0]), float(v[1])) for b, v in row.items()})
                for name, row in raw.items()]
    except (ValueError, TypeError, IndexError, AttributeError) as e:
        raise CliError(f"{path}: {e}") from None


def cmd_bench(args) -> int:
    if args.measurements:
        rows = _measurements_file(args.measurements)
    else:
        if not args.corpus:
            raise CliError("bench needs a corpus directory or --measurements")
        cases = sorted(Path(args.corpus).glob("*.model"))
        if not cases:
            raise CliError(f"{args.corpus}: no *.model files")
        reports = []
        rows = []
        for path in cases:
            m = _load_model(str(path))
            sched_path = path.with_suffix(".sched")
            sched = _load_schedule(str(sched_path)) if sched_path.exists() else Schedule()
            row = {}
            for b in args.bounds:
                r = measure(path.stem, m, sched, bound=b, fold=not args.no_fold)
                reports.append(r)
                row[b] = (r.rate, max(r.t_gr, 1e-9))
            rows.append((path.stem, row))
        sys.stdout.write(render_table(reports))
    try:
        gains = bound_gains(rows)
    except ValueError as e:
        print(f"tuning skipped: {e}", file=sys.stderr)
        return EXIT_OK
    for b, g in gains.items():
        print(f"gain {b} {g:.6f}")
    print(f"selected BOUND {tune_bound(rows)}")
    return EXIT_OK


# -- gen-corpus ---------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    seed = args.seed if args.seed is not None else seed_from_env()
    rng = random.Random(seed)
    base = PROFILES[args.profile]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        p = vary(base, rng) if args.vary else base
        m, s = generate_case(rng.randrange(1 << 32), p)
        name = f"case{i:04d}"
        (out / f"{name}.model").write_text(serialize_model(m))
        (out / f"{name}.sched").write_text(s.serialize())
    print(f"wrote {args.count} cases to {out} (seed {seed})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="recfa", description="Control-flow attestation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="derive skip/forward policies from a model")
    p.add_argument("model")
    p.add_argument("-o", "--out", default="policy", help="policy directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("attest", help="run a schedule and write a sealed report")
    p.add_argument("model")
    p.add_argument("schedule")
    p.add_argument("policy", help="directory written by 'analyze'")
    p.add_argument("-o", "--output", default="report.bin")
    p.add_argument("--bound", type=int, default=DEFAULT_BOUND)
    p.add_argument("--attack", type=_parse_attack, help="<occurrence>:<site-hex>:<target-hex>")
    p.add_argument("--no-fold", action="store_true")
    p.add_argument("--raw-dump", metavar="FILE", help="also write the unfolded event lines")
    p.add_argument("--compressor", choices=("zlib", "store"), default="zlib")
    p.set_defaults(func=cmd_attest)

    p = sub.add_parser("verify", help="check a report against the policy")
    p.add_argument("report", help="report file, or - for stdin")
    p.add_argument("policy")
    p.add_argument("--abort-on-first", action="store_true")
    p.add_argument("--depth-limit", type=int)
    p.add_argument("--max-events", type=int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="measure a corpus and tune BOUND")
    p.add_argument("corpus", nargs="?")
    p.add_argument("--bounds", type=_bounds, default=[2, 4, 8, 16])
    p.add_argument("--measurements", metavar="JSON", help='{"programs": {name: {bound: [R, T_gr]}}}')
    p.add_argument("--no-fold", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-corpus", help="write seeded synthetic models and schedules")
    p.add_argument("out")
    p.add_argument("-n", "--count", type=int, default=10)
    p.add_argument("--profile", choices=sorted(PROFILES), default="default")
    p.add_argument("--seed", type=int, help="overrides RECFA_SEED")
    p.add_argument("--vary", action="store_true", help="perturb parameters per case")
    p.set_defaults(func=cmd_gen_corpus)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"recfa: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
