"""Prover side: execute a model under a schedule, emit monitoring-point
events and fold loops and recursions online."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

from .analysis import LoopInfo, RecursionInfo, analyze_recursions, detect_loops, loop_chains
from .events import DCALL, ICALL, IJMP, RET, Event
from .model import (
    OP_COND, OP_DCALL, OP_GOTO, OP_HALT, OP_ICALL, OP_IJMP, OP_LONGJMP, OP_RET,
    ProgramModel,
)
from .schedule import Schedule, ScheduleError, TapeDecider


class FoldError(RuntimeError):
    """Marker imbalance; indicates a model or loop-analysis bug."""


class ExecutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    occurrence: int         # 1-based dynamic occurrence at ``site``
    site: int
    forged_target: int


class Marker(NamedTuple):
    kind: str       # le ls ld lx re rs rd rx
    ident: int


LOOP_ENTRY, BODY_START, BODY_END, LOOP_EXIT = "le", "ls", "ld", "lx"
REC_ENTRY, REC_START, REC_RETURN, REC_EXIT = "re", "rs", "rd", "rx"


class Folder:
    """Loop stack plus path stack.

    ``loop_stack`` holds ``None`` for a region tag or the index of a frame on
    ``frames``; frames above the top-most tag are the deduplicated event
    paths of the innermost open loop or recursion.
    """

    def __init__(self):
        self.out: list[Event] = []
        self.frames: list[list[Event]] = [self.out]
        self.loop_stack: list[int | None] = []
        self._bases: list[int] = []
        self.cur = self.out

    def event(self, ev: Event) -> None:
        self.cur.append(ev)

    def open_region(self, ident: int = -1) -> None:
        self.loop_stack.append(None)
        self._bases.append(len(self.frames))

    def open_frame(self, ident: int = -1) -> None:
        if not self._bases:
            raise FoldError("frame opened outside any region")
        f: list[Event] = []
        self.frames.append(f)
        self.loop_stack.append(len(self.frames) - 1)
        self.cur = f

    def dedup(self, ident: int = -1) -> None:
        if not self._bases:
            raise FoldError("body end outside any region")
        base = self._bases[-1]
        frames = self.frames
        if len(frames) - 1 < base:
            return
        top = frames[-1]
        if top in frames[base:-1]:
            frames.pop()
            if self.loop_stack.pop() != len(frames):
                raise FoldError("loop stack out of step with path stack")
            self.cur = frames[-1]

    def close_region(self, ident: int = -1) -> None:
        if not self._bases:
            raise FoldError("exit without matching entry")
        base = self._bases.pop()
        ls = self.loop_stack
        while ls[-1] is not None:
            ls.pop()
        ls.pop()
        region = self.frames[base:]
        del self.frames[base:]
        cur = self.frames[-1]
        for f in region:
            cur.extend(f)
        self.cur = cur

    def rec_entry(self, ident: int = -1) -> None:
        self.open_region()
        self.open_frame()

    def next_iteration(self, ident: int = -1) -> None:
        # body end immediately followed by the next body start; a duplicate
        # top frame is popped and a fresh one pushed at the same index, which
        # amounts to clearing it
        if not self._bases:
            raise FoldError("body end outside any region")
        frames = self.frames
        top = frames[-1]
        n = len(frames) - 1
        for k in range(self._bases[-1], n):
            if frames[k] == top:
                top.clear()
                self.cur = top
                return
        f: list[Event] = []
        frames.append(f)
        self.loop_stack.append(n + 1)
        self.cur = f

    def rec_point(self, ident: int = -1) -> None:
        if len(self.frames) - 1 < self._bases[-1] if self._bases else True:
            self.dedup()
            self.open_frame()
        else:
            self.next_iteration()

    def finish(self) -> list[Event]:
        if self._bases:
            raise FoldError(f"{len(self._bases)} unclosed region(s) at end of stream")
        return self.out

    def apply(self, mk: Marker) -> None:
        _DISPATCH[mk.kind](self, mk.ident)


_DISPATCH = {
    LOOP_ENTRY: Folder.open_region, BODY_START: Folder.open_frame,
    BODY_END: Folder.dedup, LOOP_EXIT: Folder.close_region,
    REC_ENTRY: Folder.rec_entry, REC_START: Folder.rec_point,
    REC_RETURN: Folder.rec_point, REC_EXIT: Folder.close_region,
}


class RawSink:
    markers = False

    def __init__(self):
        self.out: list[Event] = []
        self.cur = self.out

    def finish(self) -> list[Event]:
        return self.out


class AnnotatedSink:
    """Records events interleaved with structural markers."""

    markers = True

    def __init__(self):
        self.out: list = []
        self.cur = self.out

    def _mk(kind):
        def f(self, ident=-1):
            self.out.append(Marker(kind, ident))
        return f

    open_region = _mk(LOOP_ENTRY)
    open_frame = _mk(BODY_START)
    dedup = _mk(BODY_END)
    close_region = _mk(LOOP_EXIT)
    rec_entry = _mk(REC_ENTRY)
    rec_start = _mk(REC_START)
    rec_return = _mk(REC_RETURN)
    rec_exit = _mk(REC_EXIT)
    del _mk

    def next_iteration(self, ident=-1):
        self.out += (Marker(BODY_END, ident), Marker(BODY_START, ident))

    def finish(self) -> list:
        return self.out


Folder.markers = True
Folder.rec_start = Folder.rec_point
Folder.rec_return = Folder.rec_point
Folder.rec_exit = Folder.close_region


def fold_stream(annotated: Iterable, m: ProgramModel | None = None,
                loops: Sequence[LoopInfo] | None = None,
                recs: Sequence[RecursionInfo] | None = None) -> list[Event]:
    """Replay an annotated stream through a Folder."""
    known = None if loops is None else {lp.loop_id for lp in loops}
    fd = Folder()
    for it in annotated:
        if isinstance(it, Marker):
            if known is not None and it.kind[0] == "l" and it.ident not in known:
                raise FoldError(f"marker for unknown loop {it.ident}")
            fd.apply(it)
        else:
            fd.cur.append(it)
    return fd.finish()


# -- static instrumentation plan ---------------------------------------------


@dataclass
class Plan:
    model: ProgramModel
    loops: list[LoopInfo]
    recs: list[RecursionInfo]
    scs: frozenset[int]
    chains: dict[int, tuple[int, ...]] = field(init=False)
    re_sites: frozenset[int] = field(init=False)
    code: dict[int, tuple] = field(init=False)
    trans: dict[int, dict[int, tuple] | None] = field(init=False)
    entry_marks: dict[int, tuple] = field(init=False)
    exit_marks: dict[int, tuple] = field(init=False)

    def __post_init__(self):
        m = self.model
        self.loop_by_id = {lp.loop_id: lp for lp in self.loops}
        self.chains = loop_chains(m, self.loops)
        self.re_sites = frozenset(s for r in self.recs if r.foldable for s in r.external_call_sites)
        self.code = {a: self._compile(a) for a in m.ops}
        self.trans = {}
        for a in m.ops:
            d = {}
            for b in m.intra_succs(a):
                mk = self.edge_marks(a, b)
                if mk:
                    d[b] = mk
            self.trans[a] = d or None
        # jump straight through chains of unconditional, unmarked edges
        for a, c in self.code.items():
            if c[0] != 0:
                continue
            seen = {a}
            cur, dst = a, c[1]
            while (self.trans[cur] is None and self.code[dst][0] == 0 and dst not in seen):
                seen.add(dst)
                cur, dst = dst, self.code[dst][1]
            if self.trans[cur] is None and dst != c[1]:
                self.code[a] = (0, dst)
        self.entry_marks = {}
        for f in m.functions:
            ch = self.chains.get(f.entry, ())
            self.entry_marks[f.entry] = tuple(
                mk for lid in reversed(ch) for mk in (Marker(LOOP_ENTRY, lid), Marker(BODY_START, lid)))
        self.exit_marks = {a: tuple(Marker(LOOP_EXIT, lid) for lid in ch) for a, ch in self.chains.items()}

    def _compile(self, a: int) -> tuple:
        op = self.model.ops[a]
        if op.op == OP_GOTO:
            return (0, op.succs[0])
        if op.op == OP_COND:
            return (1, op.succs) if len(op.succs) > 1 else (0, op.succs[0])
        if op.op == OP_DCALL:
            if op.library:
                return (3, op.call_after)
            ev = None if a in self.scs else Event(DCALL, a, None)
            return (2, op.target, op.call_after, ev, a in self.re_sites, op.setjmp)
        if op.op == OP_ICALL:
            return (4, op.succs, op.call_after, {t: Event(ICALL, a, t) for t in op.succs})
        if op.op == OP_IJMP:
            return (5, op.succs, {t: Event(IJMP, a, t) for t in op.succs})
        if op.op == OP_LONGJMP:
            return (6,)
        if op.op == OP_RET:
            f = self.model.func_of[a].entry
            return (7, {ca: Event(RET, a, ca) for _, ca in self.model.callers[f]})
        return (8,)

    def edge_marks(self, u: int, v: int) -> tuple:
        cu = self.chains.get(u, ())
        cv = self.chains.get(v, ())
        out = []
        for lid in cu:
            if lid not in cv:
                if u in self.loop_by_id[lid].body_ends:
                    out.append(Marker(BODY_END, lid))
                out.append(Marker(LOOP_EXIT, lid))
        for lid in cv:
            lp = self.loop_by_id[lid]
            if lid in cu and v == lp.body_start:
                out += [Marker(BODY_END, lid), Marker(BODY_START, lid)]
        for lid in reversed(cv):
            if lid not in cu:
                out += [Marker(LOOP_ENTRY, lid), Marker(BODY_START, lid)]
        return tuple(out)


def make_plan(m: ProgramModel, scs: Iterable[int] = (), loops=None, recs=None) -> Plan:
    if loops is None:
        loops = detect_loops(m)
    if recs is None:
        recs = analyze_recursions(m, loops=loops)
    return Plan(m, list(loops), list(recs), frozenset(scs))


@dataclass
class ProverRun:
    events: list
    ev_total: int
    steps: int
    attacked: bool = False
    skipped: int = 0        # filtered direct calls, executed but not emitted

    @property
    def ev_all(self) -> int:
        return self.ev_total + self.skipped


_SINK_CALL = {
    LOOP_ENTRY: "open_region", BODY_START: "open_frame", BODY_END: "dedup",
    LOOP_EXIT: "close_region", REC_ENTRY: "rec_entry", REC_START: "rec_start",
    REC_RETURN: "rec_return", REC_EXIT: "rec_exit",
}


def _binder(sink):
    """Turn marker tuples into (bound method, id) tuples for ``sink``."""
    memo: dict = {}

    def bind(seq):
        if not seq:
            return None
        hit = memo.get(seq)
        if hit is None:
            out = []
            i = 0
            while i < len(seq):
                mk = seq[i]
                if (mk.kind == BODY_END and i + 1 < len(seq)
                        and seq[i + 1] == (BODY_START, mk.ident)):
                    out.append((sink.next_iteration, mk.ident))
                    i += 2
                else:
                    out.append((getattr(sink, _SINK_CALL[mk.kind]), mk.ident))
                    i += 1
            hit = memo[seq] = tuple(out)
        return hit
    return bind


def _tape_error(decider, pc, src, dst, options):
    if src is None:
        return ScheduleError(f"schedule exhausted at {pc:x}")
    if src != pc:
        return ScheduleError(f"schedule expects a decision at {src:x}, execution is at {pc:x}")
    return ScheduleError(f"invalid successor {dst:x} at {pc:x}")


def _runtime_code(plan: Plan, sink) -> dict[int, tuple]:
    """Per-run copy of the plan's code with marker calls bound to ``sink``.

    0 goto (dst, marks) | 1 cond (succs, marks-by-succ) | 2 dcall (target, ca,
    event, re-site, setjmp, entry marks, call-to-ca marks) | 3 library call (ca,
    marks) | 4 icall (succs, ca, events, call-to-ca marks) | 5 ijmp (succs,
    events, marks-by-target) | 6 longjmp | 7 return (events, exit marks) | 8 halt
    """
    marks = sink.markers
    bind = _binder(sink) if marks else (lambda seq: None)
    trans = plan.trans if marks else {}
    entry = plan.entry_marks
    out: dict[int, tuple] = {}

    def tmap(a):
        d = trans.get(a)
        if not d:
            return None
        return {v: bind(mk) for v, mk in d.items()}

    def tget(a, v):
        d = trans.get(a)
        return bind(d.get(v, ())) if d else None

    for a, c in plan.code.items():
        op = c[0]
        if op == 0:
            out[a] = (0, c[1], tget(a, c[1]))
        elif op == 1:
            out[a] = (1, c[1], tmap(a))
        elif op == 2:
            _, target, ca, ev, re_site, is_setjmp = c
            out[a] = (2, target, ca, ev, re_site and marks, is_setjmp,
                      bind(entry[target]) if marks else None, tget(a, ca))
        elif op == 3:
            out[a] = (3, c[1], tget(a, c[1]))
        elif op == 4:
            out[a] = (4, c[1], c[2], c[3], tget(a, c[2]))
        elif op == 5:
            out[a] = (5, c[1], c[2], tmap(a))
        elif op == 7:
            out[a] = (7, c[1], bind(plan.exit_marks.get(a, ())) if marks else None)
        else:
            out[a] = c
    return out


def execute(plan: Plan, decider, sink=None, attack: AttackSpec | None = None,
            max_steps: int = 10**9) -> ProverRun:
    """Run the model from its main entry, feeding ``sink``."""
    m = plan.model
    if sink is None:
        sink = RawSink()
    marks = sink.markers
    code = _runtime_code(plan, sink)
    if marks:
        bind = _binder(sink)
        entry_marks = {a: bind(mk) for a, mk in plan.entry_marks.items()}
        exit_marks = {a: bind(mk) for a, mk in plan.exit_marks.items()}
        rec_entry, rec_start, rec_return, rec_exit = sink.rec_entry, sink.rec_start, sink.rec_return, sink.rec_exit
    else:
        bind = None
        entry_marks, exit_marks = {}, {}
    tape = decider._it.__next__ if isinstance(decider, TapeDecider) else None
    choose = decider.choose

    atk_site = attack.site if attack else None
    if attack is not None:
        if m.ops.get(attack.site) is None or m.ops[attack.site].op not in (OP_ICALL, OP_IJMP, OP_RET, OP_LONGJMP):
            raise ValueError(f"attack site {attack.site:x} is not an indirect branch or return")
        if attack.occurrence < 1:
            raise ValueError("attack occurrence is 1-based")
    atk_seen = 0
    forged = None

    # frames: (call site, call-after, func, in_region, root, act_id, call-to-ca marks)
    stack: list[tuple] = []
    push = stack.append
    pop = stack.pop
    setjmps: list[tuple[int, int]] = []   # (activation id, setjmp return point)
    func = m.main.entry
    in_region = False
    root = False
    act = 0
    next_act = 1
    pc = func
    ev_total = 0
    skipped = 0
    steps = 0
    pc_closed = False   # loops around ``pc`` already exited
    for fn, i in entry_marks.get(func) or ():
        fn(i)
    app = sink.cur.append

    while True:
        steps += 1
        if steps > max_steps:
            raise ExecutionError(f"step limit {max_steps} exceeded")
        c = code[pc]
        op = c[0]
        if op == 7:
            xm = c[2]
            if xm:
                for fn, i in xm:
                    fn(i)
                app = sink.cur.append
            if in_region:
                rec_return()
                app = sink.cur.append
            if not stack:
                pc_closed = True
                break
            fr = pop()
            ca = fr[1]
            if pc == atk_site:
                atk_seen += 1
                if atk_seen == attack.occurrence:
                    forged = Event(RET, pc, attack.forged_target)
                    pc_closed = True
                    push(fr)
                    break
            ev = c[1].get(ca)
            if ev is None:
                ev = c[1][ca] = Event(RET, pc, ca)
            app(ev)
            ev_total += 1
            if root:
                rec_exit()
                app = sink.cur.append
            _, _, func, in_region, root, act, cm = fr
            if cm:
                for fn, i in cm:
                    fn(i)
                app = sink.cur.append
            pc = ca
        elif op == 1:
            if tape is not None:
                try:
                    src, nxt = tape()
                except StopIteration:
                    raise _tape_error(decider, pc, None, None, c[1]) from None
                if src != pc or nxt not in c[1]:
                    raise _tape_error(decider, pc, src, nxt, c[1])
            else:
                nxt = choose(pc, c[1])
            tu = c[2]
            if tu is not None:
                mk = tu.get(nxt)
                if mk:
                    for fn, i in mk:
                        fn(i)
                    app = sink.cur.append
            pc = nxt
        elif op == 2:
            _, target, ca, ev, re_site, is_setjmp, em, cm = c
            if re_site:
                rec_entry()
                app = sink.cur.append
            if ev is not None:
                app(ev)
                ev_total += 1
            else:
                skipped += 1
            if is_setjmp:
                setjmps.append((act, ca))
            push((pc, ca, func, in_region, root, act, cm))
            in_region = re_site or (in_region and target == func)
            root = re_site
            func = target
            act = next_act
            next_act += 1
            pc = target
            if in_region:
                rec_start()
                app = sink.cur.append
            if em:
                for fn, i in em:
                    fn(i)
                app = sink.cur.append
        elif op == 0:
            mk = c[2]
            pc = c[1]
            if mk:
                for fn, i in mk:
                    fn(i)
                app = sink.cur.append
        elif op == 4:
            if tape is not None:
                try:
                    src, target = tape()
                except StopIteration:
                    raise _tape_error(decider, pc, None, None, c[1]) from None
                if src != pc or target not in c[3]:
                    raise _tape_error(decider, pc, src, target, c[1])
            else:
                target = choose(pc, c[1])
            if pc == atk_site:
                atk_seen += 1
                if atk_seen == attack.occurrence:
                    forged = Event(ICALL, pc, attack.forged_target)
                    break
            app(c[3][target])
            ev_total += 1
            push((pc, c[2], func, in_region, root, act, c[4]))
            in_region = False
            root = False
            func = target
            act = next_act
            next_act += 1
            pc = target
            em = entry_marks.get(target)
            if em:
                for fn, i in em:
                    fn(i)
                app = sink.cur.append
        elif op == 5:
            if tape is not None:
                try:
                    src, target = tape()
                except StopIteration:
                    raise _tape_error(decider, pc, None, None, c[1]) from None
                if src != pc or target not in c[2]:
                    raise _tape_error(decider, pc, src, target, c[1])
            else:
                target = choose(pc, c[1])
            if pc == atk_site:
                atk_seen += 1
                if atk_seen == attack.occurrence:
                    forged = Event(IJMP, pc, attack.forged_target)
                    break
            app(c[2][target])
            ev_total += 1
            tu = c[3]
            if tu is not None:
                mk = tu.get(target)
                if mk:
                    for fn, i in mk:
                        fn(i)
                    app = sink.cur.append
            pc = target
        elif op == 3:
            mk = c[2]
            pc = c[1]
            if mk:
                for fn, i in mk:
                    fn(i)
                app = sink.cur.append
        elif op == 6:
            live = {fr[5] for fr in stack} | {act}
            while setjmps and setjmps[-1][0] not in live:
                setjmps.pop()
            dest = setjmps[-1] if setjmps else None
            if pc == atk_site:
                atk_seen += 1
                if atk_seen == attack.occurrence:
                    forged = Event(IJMP, pc, attack.forged_target)
                    break
            if dest is None:
                break   # longjmp without a live setjmp: the process dies
            target = dest[1]
            app(Event(IJMP, pc, target))
            ev_total += 1
            while act != dest[0]:
                if marks:
                    for fn, i in exit_marks.get(pc) or ():
                        fn(i)
                    if root:
                        rec_exit()
                pc, _, func, in_region, root, act, _ = pop()
            if marks:
                for fn, i in bind(plan.edge_marks(pc, target)) or ():
                    fn(i)
                app = sink.cur.append
            pc = target
        else:   # halt
            break

    attacked = forged is not None
    if attacked:
        app(forged)
        ev_total += 1
    # close every open region, innermost activation first
    if marks:
        while True:
            if not pc_closed:
                for fn, i in exit_marks.get(pc) or ():
                    fn(i)
            pc_closed = False
            if root:
                rec_exit()
            if not stack:
                break
            pc, _, func, in_region, root, act, _ = pop()
    return ProverRun(sink.finish(), ev_total, steps, attacked, skipped)


def _decider(schedule):
    if hasattr(schedule, "choose"):
        return schedule
    return TapeDecider(schedule if schedule is not None else Schedule())


def interpret(m: ProgramModel, schedule, attack: AttackSpec | None = None,
              scs: Iterable[int] = (), plan: Plan | None = None) -> list[Event]:
    """Raw event sequence; direct calls in ``scs`` are not emitted."""
    plan = plan or make_plan(m, scs)
    return _run(plan, schedule, False, attack).events


def annotate(m: ProgramModel, schedule, attack: AttackSpec | None = None,
             scs: Iterable[int] = (), plan: Plan | None = None) -> list:
    """Raw events interleaved with structural markers."""
    plan = plan or make_plan(m, scs)
    return execute(plan, _decider(schedule), AnnotatedSink(), attack).events


def run_prover(m: ProgramModel, schedule, attack: AttackSpec | None = None,
               scs: Iterable[int] = (), fold: bool = True, plan: Plan | None = None) -> ProverRun:
    """Interpret and fold online (or not); ``ev_total`` counts raw events."""
    plan = plan or make_plan(m, scs)
    return _run(plan, schedule, fold, attack)


def _run(plan: Plan, schedule, fold: bool, attack: AttackSpec | None) -> ProverRun:
    if schedule is None or isinstance(schedule, Schedule):
        from .prover_jit import execute_ids

        r = execute_ids(plan, schedule or Schedule(), fold, attack)
        if r is not None:
            return ProverRun(r.events(), r.ev_total, r.steps, r.attacked, r.skipped)
    return execute(plan, _decider(schedule), Folder() if fold else RawSink(), attack)


def as_pairs(m: ProgramModel, events: Iterable[Event]) -> list[tuple[int, int]]:
    """Events as (source, target) pairs; direct calls resolve their callee."""
    return [(e.src, m.ops[e.src].target if e.dst is None else e.dst) for e in events]
