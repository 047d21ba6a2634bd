"""Shared end-to-end oracles for the verifier and acceptance tests."""

import random
from dataclasses import dataclass

from recfa.analysis import analyze_recursions, detect_loops
from recfa.callsite import build_abstract_graph, build_skip_map, compute_skippable
from recfa.condenser import ZLIB, condense
from recfa.corpus import GenParams, generate_model, generate_schedule, vary
from recfa.events import DCALL, ICALL, IJMP, RET
from recfa.policy import build_forward_map
from recfa.prover import AttackSpec, interpret, make_plan, run_prover
from recfa.verifier import BACKWARD_RETURN, SECURE, STACK_UNDERFLOW, FORWARD_TARGET, enforce, recover, verify_report

ORACLE_PARAMS = GenParams(setjmp=True, recursion=0.6, n_funcs=8)
FORGED_BASE = 0x7F000000


@dataclass
class Case:
    seed: int
    m: object
    sched: object
    M: object
    F: object
    scs: frozenset
    plan_f: object
    plan_u: object


def make_case(seed: int, params: GenParams = ORACLE_PARAMS) -> Case:
    rng = random.Random(seed)
    p = vary(params, rng)
    m = generate_model(rng, p)
    loops = detect_loops(m)
    recs = analyze_recursions(m, loops=loops)
    sched = generate_schedule(m, rng, p, loops)
    g = build_abstract_graph(m)
    scs = compute_skippable(g)
    return Case(seed, m, sched, build_skip_map(g, scs), build_forward_map(m, scs), scs,
                make_plan(m, scs, loops, recs), make_plan(m, (), loops, recs))


def transparency_mismatch(c: Case) -> str | None:
    """None when folding and filtering are invisible to the verifier."""
    raw_u = interpret(c.m, c.sched, plan=c.plan_u)
    raw_f = interpret(c.m, c.sched, plan=c.plan_f)
    folded = run_prover(c.m, c.sched, plan=c.plan_f).events
    v_fold = verify_report(condense(folded, 4, ZLIB), c.F, c.M)
    v_raw = enforce(raw_u, c.F)
    if v_fold.status != SECURE or v_raw.status != SECURE:
        return f"seed {c.seed}: folded {v_fold.status}, raw {v_raw.status}"
    want = [e.src for e in raw_u if e.kind == DCALL]
    got = [e.src for e in recover(raw_f, c.M, c.F) if e.kind == DCALL]
    if got != want:
        return f"seed {c.seed}: recovered direct calls differ"
    return None


def attack_specs(c: Case, rng: random.Random, kinds) -> list[tuple[AttackSpec, str]]:
    """One forged event per executed branch kind in ``kinds``, at a random occurrence."""
    raw = interpret(c.m, c.sched, plan=c.plan_u)
    seen: dict[int, int] = {}
    sites: dict[str, list[tuple[int, int]]] = {}
    for e in raw:
        if e.kind == DCALL:
            continue
        seen[e.src] = seen.get(e.src, 0) + 1
        sites.setdefault(e.kind, []).append((e.src, seen[e.src]))
    out = []
    for kind in kinds:
        if sites.get(kind):
            site, occ = rng.choice(sites[kind])
            target = FORGED_BASE + 4 * rng.randrange(1 << 16)
            out.append((AttackSpec(occ, site, target), kind))
    return out


def attack_outcome(c: Case, spec: AttackSpec, kind: str) -> str | None:
    """None when the forged event is caught as required."""
    run = run_prover(c.m, c.sched, attack=spec, plan=c.plan_f)
    if not run.attacked:
        return f"seed {c.seed}: attack at {spec.site:x} not injected"
    v = verify_report(condense(run.events, 4, ZLIB), c.F, c.M)
    if kind in (ICALL, IJMP):
        hit = any(x.rule == FORWARD_TARGET and (x.event.src, x.event.dst) == (spec.site, spec.forged_target)
                  for x in v.violations)
    else:
        hit = any(x.rule in (BACKWARD_RETURN, STACK_UNDERFLOW) and x.event.dst == spec.forged_target
                  for x in v.violations)
    return None if hit else f"seed {c.seed}: {kind} forgery {spec} missed: {v.render()!r}"


FORWARD_KINDS = (ICALL, IJMP)
RETURN_KINDS = (RET,)
