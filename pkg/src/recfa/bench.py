"""Benchmark measurements and the derived attestation/verification rates."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Sequence

from .analysis import analyze_recursions, detect_loops
from .callsite import build_abstract_graph, build_skip_map, compute_skippable
from .condenser import (
    DEFAULT_BOUND, ZLIB, encode_words, greedy_compress, greedy_compress_ids, knot_expand, open_report,
    seal,
)
from .model import ProgramModel, load_model
from .policy import build_forward_map
from .prover import make_plan, run_prover
from .prover_jit import execute_ids
from .schedule import Repeat, Schedule
from .verifier import enforce


@dataclass
class BenchReport:
    name: str
    bound: int
    ev_total: int       # every monitoring-point event, skipped direct calls included
    ev_fold: int
    ev_gr: int          # events plus knots after greedy compression
    t_instr: float      # interpretation + folding (a simulation stand-in)
    t_gr: float         # greedy compression, word encoding and sealing
    t_gr_inv: float
    t_vrf: float
    zs: int             # report bytes
    status: str = ""

    @property
    def reduction(self) -> float:
        return (self.ev_total - self.ev_gr) / self.ev_total if self.ev_total else 0.0

    @property
    def e_speed(self) -> float:
        return self.ev_total / (self.t_instr + self.t_gr)

    @property
    def d_speed(self) -> float:
        return self.zs / (self.t_instr + self.t_gr)

    @property
    def v_speed(self) -> float:
        return self.ev_fold / (self.t_gr_inv + self.t_vrf)

    @property
    def rate(self) -> float:
        return self.ev_fold / self.ev_gr if self.ev_gr else 1.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(reduction=self.reduction, e_speed=self.e_speed, d_speed=self.d_speed,
                 v_speed=self.v_speed, rate=self.rate)
        return d


def _tick() -> float:
    return time.perf_counter()


def measure(name: str, m: ProgramModel, schedule, bound: int = DEFAULT_BOUND,
            compressor_id: int = ZLIB, fold: bool = True, filtering: bool = True) -> BenchReport:
    """Run the whole pipeline once and time each stage."""
    loops = detect_loops(m)
    recs = analyze_recursions(m, loops=loops)
    g = build_abstract_graph(m)
    scs = compute_skippable(g) if filtering else frozenset()
    M = build_skip_map(g, scs)
    F = build_forward_map(m, scs)
    plan = make_plan(m, scs, loops, recs)

    t0 = _tick()
    run = execute_ids(plan, schedule, fold) if isinstance(schedule, Schedule) else None
    if run is None:
        run = run_prover(m, schedule, fold=fold, plan=plan)
        t1 = _tick()
        items = greedy_compress(run.events, bound)
        n_fold = len(run.events)
    else:
        t1 = _tick()
        items = greedy_compress_ids(run.ids, run.table, bound)
        n_fold = len(run.ids)
    data = seal(encode_words(items), compressor_id, bound, n_fold)
    t2 = _tick()
    _, decoded = open_report(data)
    events = knot_expand(decoded)
    t3 = _tick()
    verdict = enforce(events, F, M)
    t4 = _tick()
    return BenchReport(name, bound, run.ev_total + run.skipped, n_fold, len(items),
                       t1 - t0, t2 - t1, t3 - t2, t4 - t3, len(data), verdict.status)


_HEADER = ("program", "BOUND", "ev_total", "ev_fold", "ev_gr", "reduction", "R",
           "T_instr", "T_gr", "Zs", "E-speed", "D-speed", "V-speed", "verdict")


def render_table(rows: Sequence[BenchReport]) -> str:
    lines = ["\t".join(_HEADER)]
    for r in rows:
        lines.append("\t".join([
            r.name, str(r.bound), str(r.ev_total), str(r.ev_fold), str(r.ev_gr),
            f"{r.reduction:.3f}", f"{r.rate:.3f}", f"{r.t_instr:.4f}", f"{r.t_gr:.4f}", str(r.zs),
            f"{r.e_speed:.0f}", f"{r.d_speed:.0f}", f"{r.v_speed:.0f}", r.status,
        ]))
    return "\n".join(lines) + "\n"


# -- a loop-dominated trace for throughput runs -------------------------------

THROUGHPUT_MODEL = """\
func main entry 1000
node 1004
node 1008
node 100c
node 1020
func f1 entry 2000
node 2004
func f2 entry 3000
node 3004
func g entry 5000
edge 1000 1004 fallthrough
edge 1004 1008 cond-branch
edge 1004 1020 cond-branch
edge 1008 2000 indirect-call callafter 100c
edge 1008 3000 indirect-call callafter 100c
itargets 1008 2000 3000
edge 100c 1004 fallthrough
edge 2000 5000 direct-call callafter 2004
edge 2004 100c return
edge 3000 5000 direct-call callafter 3004
edge 3004 100c return
edge 5000 2004 return
edge 5000 3004 return
"""

EVENTS_PER_ITERATION = 4


def throughput_case(raw_events: int) -> tuple[ProgramModel, Schedule]:
    """A model and schedule emitting ``raw_events`` events (rounded up to a
    multiple of eight) while alternating between two call paths."""
    pairs = -(-raw_events // (2 * EVENTS_PER_ITERATION))
    body = ((0x1004, 0x1008), (0x1008, 0x2000), (0x1004, 0x1008), (0x1008, 0x3000))
    return load_model(THROUGHPUT_MODEL), Schedule([Repeat(pairs, body), (0x1004, 0x1020)])
