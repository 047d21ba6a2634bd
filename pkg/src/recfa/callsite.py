"""Call-site filtering: abstract graph over monitoring points, skippable
direct calls and the skip mapping handed to the verifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

from .model import (
    OP_COND, OP_DCALL, OP_GOTO, OP_HALT, OP_ICALL, OP_IJMP, OP_LONGJMP, OP_RET,
    ProgramModel,
)

N_DCALL = "direct-call"
N_ICALL = "indirect-call"
N_IJMP = "indirect-jump"
N_RET = "return"
N_ENTRY = "function-entry"
N_EXIT = "program-exit"


class AbstractNode(NamedTuple):
    kind: str
    site: int
    target: int | None = None

    def __str__(self) -> str:
        t = "" if self.target is None else f"->{self.target:x}"
        return f"{self.kind}@{self.site:x}{t}"


EXIT = AbstractNode(N_EXIT, 0)


@dataclass
class AbstractGraph:
    nodes: list[AbstractNode]
    succ: dict[AbstractNode, tuple[AbstractNode, ...]]
    pred: dict[AbstractNode, tuple[AbstractNode, ...]]
    # continuation addresses of indirect nodes (targets or setjmp return points)
    targets: dict[AbstractNode, tuple[int, ...]] = field(default_factory=dict)
    after_setjmp: frozenset[AbstractNode] = frozenset()

    @property
    def edges(self) -> set[tuple[AbstractNode, AbstractNode]]:
        return {(u, v) for u, vs in self.succ.items() for v in vs}


class _Walker:
    def __init__(self, m: ProgramModel):
        self.m = m
        self.cache: dict[int, frozenset[AbstractNode]] = {}
        self.ret_targets = {
            f.entry: tuple(dict.fromkeys(ca for _, ca in m.callers[f.entry]))
            for f in m.functions
        }

    def pmp_nodes(self, addr: int) -> tuple[AbstractNode, ...] | None:
        """Abstract nodes located at ``addr``, or None if it is not a PMP."""
        m = self.m
        op = m.ops[addr]
        if op.op == OP_DCALL and not op.library:
            return (AbstractNode(N_DCALL, addr, op.target),)
        if op.op == OP_ICALL:
            return (AbstractNode(N_ICALL, addr),)
        if op.op in (OP_IJMP, OP_LONGJMP):
            return (AbstractNode(N_IJMP, addr),)
        if op.op == OP_RET:
            cas = self.ret_targets[m.func_of[addr].entry]
            return tuple(AbstractNode(N_RET, addr, ca) for ca in cas) or (EXIT,)
        if op.op == OP_HALT:
            return (EXIT,)
        return None

    def first(self, start: int) -> frozenset[AbstractNode]:
        """First monitoring points reachable from ``start`` with no PMP in between."""
        hit = self.cache.get(start)
        if hit is not None:
            return hit
        out: set[AbstractNode] = set()
        seen = {start}
        work = [start]
        while work:
            a = work.pop()
            nodes = self.pmp_nodes(a)
            if nodes is not None:
                out.update(nodes)
                continue
            op = self.m.ops[a]
            nxt = op.succs if op.op in (OP_GOTO, OP_COND) else (op.call_after,)
            for b in nxt:
                if b not in seen:
                    seen.add(b)
                    work.append(b)
        res = frozenset(out)
        self.cache[start] = res
        return res


def build_abstract_graph(m: ProgramModel) -> AbstractGraph:
    w = _Walker(m)
    nodes: set[AbstractNode] = set()
    conts: dict[AbstractNode, tuple[int, ...]] = {}
    for a in sorted(m.ops):
        got = w.pmp_nodes(a)
        if got is None or got == (EXIT,):
            continue
        op = m.ops[a]
        for n in got:
            nodes.add(n)
            if n.kind == N_DCALL:
                conts[n] = (op.target,)
            elif n.kind == N_RET:
                conts[n] = (n.target,)
            elif op.op == OP_LONGJMP:
                conts[n] = tuple(sorted(m.setjmp_returns))
            else:
                conts[n] = op.succs
    for f in m.functions:
        if f.name not in m.library_functions and not m.callers[f.entry]:
            n = AbstractNode(N_ENTRY, f.entry)
            nodes.add(n)
            conts[n] = (f.entry,)

    succ: dict[AbstractNode, tuple[AbstractNode, ...]] = {}
    for n in nodes:
        reached: set[AbstractNode] = set()
        for a in conts[n]:
            reached |= w.first(a)
        if n.kind == N_IJMP and not conts[n]:
            reached.add(EXIT)       # longjmp with no setjmp anywhere
        succ[n] = tuple(sorted(reached))
    if any(EXIT in vs for vs in succ.values()):
        nodes.add(EXIT)
        succ[EXIT] = ()
    pred: dict[AbstractNode, list[AbstractNode]] = {n: [] for n in nodes}
    for u in sorted(nodes):
        for v in succ[u]:
            pred[v].append(u)
    after = frozenset(n for ca in m.setjmp_returns for n in w.first(ca))
    ordered = sorted(nodes)
    targets = {n: conts[n] for n in ordered if n.kind in (N_ICALL, N_IJMP)}
    return AbstractGraph(ordered, succ, {k: tuple(v) for k, v in pred.items()}, targets, after)


def compute_skippable(g: AbstractGraph) -> frozenset[int]:
    """Direct-call sites all of whose predecessors have exactly one successor.

    Calls without predecessors, calls reached straight from a function entry
    (no wire event can trigger their recovery) and calls following a setjmp
    return point are kept.
    """
    res = set()
    for n in g.nodes:
        if n.kind != N_DCALL or n in g.after_setjmp:
            continue
        preds = g.pred[n]
        if preds and all(len(g.succ[p]) == 1 and p.kind != N_ENTRY for p in preds):
            res.add(n.site)
    return frozenset(res)


@dataclass
class SkipMap:
    entries: dict[int, list[int]] = field(default_factory=dict)

    def add(self, key: int, value: int) -> None:
        vals = self.entries.setdefault(key, [])
        if value not in vals:
            vals.append(value)

    def get(self, key: int) -> list[int]:
        return self.entries.get(key, [])

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def values(self) -> set[int]:
        return {v for vs in self.entries.values() for v in vs}

    def serialize(self) -> str:
        return "".join(f"skip {k:x} {v:x}\n" for k in sorted(self.entries) for v in self.entries[k])

    @classmethod
    def parse(cls, text: str) -> "SkipMap":
        sm = cls()
        for no, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 3 or tok[0] != "skip":
                raise ValueError(f"line {no}: expected 'skip <key> <value>'")
            sm.add(int(tok[1], 16), int(tok[2], 16))
        return sm


def build_skip_map(g: AbstractGraph, scs: frozenset[int] | set[int]) -> SkipMap:
    """Map each predecessor's key address to the skipped call sites following it.

    The key is the predecessor's target address, except for direct-call
    predecessors, which are keyed by their call site (they travel on the
    wire as a single address).
    """
    sm = SkipMap()
    for n in g.nodes:
        if n.kind != N_DCALL or n.site not in scs:
            continue
        for p in g.pred[n]:
            if p.kind == N_DCALL:
                keys: tuple[int, ...] = (p.site,)
            elif p.kind == N_RET:
                keys = (p.target,)
            else:
                keys = g.targets.get(p, ())
            for k in keys:
                sm.add(k, n.site)
    return sm


def direct_call_sites(m: ProgramModel) -> list[int]:
    return [a for a, op in sorted(m.ops.items()) if op.op == OP_DCALL and not op.library]
