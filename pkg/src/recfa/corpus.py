"""Seeded generator of structured synthetic program models and schedules."""

from __future__ import annotations

import os
import random
from dataclasses import dataclass, replace

from .analysis import detect_loops
from .model import (
    COND_BRANCH, DIRECT_CALL, FALLTHROUGH, INDIRECT_CALL, INDIRECT_JUMP, LONGJMP_CALL,
    RETURN, SETJMP_CALL, CfgEdge, Function, ProgramModel,
)
from .schedule import RandomDecider, Schedule

SEED_ENV = "RECFA_SEED"
_FUNC_BASE = 0x400000
_FUNC_SPAN = 0x4000
_STRIDE = 4


def seed_from_env(default: int = 0) -> int:
    v = os.environ.get(SEED_ENV)
    return int(v) if v not in (None, "") else default


@dataclass(frozen=True)
class GenParams:
    n_funcs: int = 6
    max_stmts: int = 4
    max_depth: int = 3
    w_call: float = 3.0
    w_lib: float = 0.5
    w_icall: float = 1.0
    w_if: float = 1.5
    w_loop: float = 1.0
    w_switch: float = 0.7
    w_nop: float = 1.0
    recursion: float = 0.3          # chance per non-main function to self-recurse
    unfoldable_recursion: float = 0.4
    setjmp: bool = False
    fuel: int = 120
    trips: tuple[int, int] = (1, 5)
    max_fanout: int = 3
    # "loop-heavy": main's top level is loops only and callees are straight-line
    shape: str = "mixed"


# bodies of at most two statements with two-way icalls: at most 4 iteration paths
LOOP_HEAVY = GenParams(n_funcs=5, max_stmts=2, max_depth=1, w_call=1.0, w_lib=0.5, w_icall=1.0,
                       w_if=0.0, w_loop=1.0, w_switch=0.0, w_nop=0.3, recursion=0.0,
                       fuel=10**6, trips=(100, 300), max_fanout=2, shape="loop-heavy")
LOOP_FREE = GenParams(w_loop=0.0, recursion=0.0)


class _Fn:
    def __init__(self, idx: int, name: str):
        self.idx = idx
        self.name = name
        self.entry = _FUNC_BASE + idx * _FUNC_SPAN
        self.next = self.entry
        self.nodes: list[int] = []
        self.end: int | None = None

    def node(self) -> int:
        a = self.next
        self.next += _STRIDE
        if a - self.entry >= _FUNC_SPAN:
            raise OverflowError(f"function {self.name} outgrew its address span")
        self.nodes.append(a)
        return a


class _Gen:
    def __init__(self, rng: random.Random, p: GenParams):
        self.rng = rng
        self.p = p
        self.edges: list[CfgEdge] = []
        self.itargets: dict[int, frozenset[int]] = {}
        self.callers: dict[int, list[int]] = {}     # entry -> call-after points
        n = max(1, p.n_funcs)
        self.funcs = [_Fn(i, "main" if i == 0 else f"f{i}") for i in range(n)]
        self.lib = _Fn(n, "libc_helper")
        self.setjmp_fn = _Fn(n + 1, "setjmp")
        self.longjmp_fn = _Fn(n + 2, "longjmp")
        self.longjmp_placed = False

    def edge(self, s, d, kind, ca=None):
        self.edges.append(CfgEdge(s, d, kind, ca))

    def call(self, fb: _Fn, cur: int, target: int, kind=DIRECT_CALL) -> int:
        ca = fb.node()
        self.edge(cur, target, kind, ca)
        self.callers.setdefault(target, []).append(ca)
        return ca

    # -- statements ---------------------------------------------------------

    def stmt(self, fb: _Fn, cur: int, depth: int) -> int:
        p, rng = self.p, self.rng
        later = self.funcs[fb.idx + 1:]
        kinds = [("call", p.w_call if later else 0), ("lib", p.w_lib), ("icall", p.w_icall if later else 0),
                 ("nop", p.w_nop)]
        if depth < p.max_depth:
            kinds += [("if", p.w_if), ("loop", p.w_loop), ("switch", p.w_switch)]
        if p.shape == "loop-heavy":
            if fb.idx == 0 and depth == 0:
                kinds = [("loop", 1.0)]
            elif fb.idx > 0:
                kinds = [k for k in kinds if k[0] in ("call", "lib", "nop")]
        names = [k for k, w in kinds if w > 0]
        if not names:
            return self.nop(fb, cur)
        kind = rng.choices(names, [w for k, w in kinds if w > 0])[0]
        if kind == "call":
            return self.call(fb, cur, rng.choice(later).entry)
        if kind == "lib":
            return self.call(fb, cur, self.lib.entry)
        if kind == "icall":
            tg = rng.sample(later, rng.randint(1, min(p.max_fanout, len(later))))
            ca = fb.node()
            self.itargets[cur] = frozenset(f.entry for f in tg)
            for f in tg:
                self.edge(cur, f.entry, INDIRECT_CALL, ca)
                self.callers.setdefault(f.entry, []).append(ca)
            return ca
        if kind == "nop":
            return self.nop(fb, cur)
        if kind == "if":
            a, b, join = fb.node(), fb.node(), None
            self.edge(cur, a, COND_BRANCH)
            self.edge(cur, b, COND_BRANCH)
            ea = self.seq(fb, a, depth + 1)
            eb = self.seq(fb, b, depth + 1) if rng.random() < 0.7 else b
            join = fb.node()
            self.edge(ea, join, FALLTHROUGH)
            self.edge(eb, join, FALLTHROUGH)
            return join
        if kind == "loop":
            head = fb.node()
            self.edge(cur, head, FALLTHROUGH)
            body = fb.node()
            latch = self.seq(fb, body, depth + 1)
            out = fb.node()
            self.edge(head, body, COND_BRANCH)
            self.edge(head, out, COND_BRANCH)
            self.edge(latch, head, FALLTHROUGH)
            return out
        # switch through an indirect jump
        cases = [fb.node() for _ in range(rng.randint(2, 4))]
        self.itargets[cur] = frozenset(cases)
        for c in cases:
            self.edge(cur, c, INDIRECT_JUMP)
        join_src = [self.seq(fb, c, depth + 1) for c in cases]
        join = fb.node()
        for e in join_src:
            self.edge(e, join, FALLTHROUGH)
        return join

    def nop(self, fb: _Fn, cur: int) -> int:
        nxt = fb.node()
        self.edge(cur, nxt, FALLTHROUGH)
        return nxt

    def seq(self, fb: _Fn, cur: int, depth: int) -> int:
        for _ in range(self.rng.randint(1, self.p.max_stmts)):
            cur = self.stmt(fb, cur, depth)
        return cur

    # -- functions ----------------------------------------------------------

    def body(self, fb: _Fn) -> None:
        rng, p = self.rng, self.p
        cur = fb.node()
        assert cur == fb.entry
        if fb.idx == 0 and p.setjmp:
            j = self.call(fb, cur, self.setjmp_fn.entry, SETJMP_CALL)
            work = fb.node()
            fb.end = fb.node()
            self.edge(j, work, COND_BRANCH)
            self.edge(j, fb.end, COND_BRANCH)
            last = self.seq(fb, work, 0)
            self.edge(last, fb.end, FALLTHROUGH)
            return
        fb.end = None
        if fb.idx > 0 and rng.random() < p.recursion:
            rec = fb.node()
            end = fb.node()
            fb.end = end
            self.edge(cur, rec, COND_BRANCH)
            self.edge(cur, end, COND_BRANCH)
            pre = self.seq(fb, rec, p.max_depth) if rng.random() < 0.5 else rec
            ca = self.call(fb, pre, fb.entry)
            if rng.random() < p.unfoldable_recursion and fb.idx + 1 < len(self.funcs):
                later = self.funcs[fb.idx + 1:]
                a, b = fb.node(), fb.node()
                self.edge(ca, a, COND_BRANCH)
                self.edge(ca, b, COND_BRANCH)
                ea = self.call(fb, a, rng.choice(later).entry)
                self.edge(ea, end, FALLTHROUGH)
                self.edge(b, end, FALLTHROUGH)
            else:
                self.edge(ca, end, FALLTHROUGH)
            return
        last = self.seq(fb, cur, 0)
        if p.setjmp and not self.longjmp_placed and fb.idx > 0:
            lj, skip = fb.node(), fb.node()
            self.edge(last, lj, COND_BRANCH)
            self.edge(last, skip, COND_BRANCH)
            dead = self.call(fb, lj, self.longjmp_fn.entry, LONGJMP_CALL)
            self.edge(dead, skip, FALLTHROUGH)
            self.longjmp_placed = True
            last = skip
        fb.end = last

    def build(self) -> ProgramModel:
        for fb in self.funcs:
            self.body(fb)
        for fb in (self.lib, self.setjmp_fn):
            fb.node()
            fb.end = fb.entry
        if self.p.setjmp:
            self.longjmp_fn.node()
        for fb in self.funcs[1:] + [self.lib, self.setjmp_fn]:
            for ca in self.callers.get(fb.entry, ()):
                self.edge(fb.end, ca, RETURN)
        extra = [self.lib] + ([self.setjmp_fn, self.longjmp_fn] if self.p.setjmp else [])
        funcs = tuple(Function(f.name, f.entry, tuple(f.nodes)) for f in self.funcs + extra)
        return ProgramModel(funcs, tuple(self.edges), dict(self.itargets), frozenset({self.lib.name}))


def generate_model(rng: random.Random, p: GenParams = GenParams()) -> ProgramModel:
    return _Gen(rng, p).build()


def generate_schedule(m: ProgramModel, rng: random.Random, p: GenParams = GenParams(),
                      loops=None, max_steps: int = 2_000_000) -> Schedule:
    """Record the decisions of one seeded random run."""
    from .prover import RawSink, execute, make_plan

    loops = detect_loops(m) if loops is None else loops
    dec = RandomDecider(m, loops, rng, fuel=p.fuel, trips=p.trips)
    execute(make_plan(m, (), loops), dec, RawSink(), max_steps=max_steps)
    return dec.schedule()


def generate_case(seed: int, p: GenParams = GenParams()) -> tuple[ProgramModel, Schedule]:
    rng = random.Random(seed)
    m = generate_model(rng, p)
    return m, generate_schedule(m, rng, p)


def vary(p: GenParams, rng: random.Random) -> GenParams:
    """Small random perturbation so a corpus covers different shapes."""
    return replace(p, n_funcs=rng.randint(2, max(2, p.n_funcs + 2)),
                   setjmp=p.setjmp or rng.random() < 0.2)
