"""Loop structure, direct recursion and recursion foldability over a ProgramModel."""

from __future__ import annotations

from dataclasses import dataclass, replace

import networkx as nx

from .model import (
    OP_COND, OP_DCALL, OP_GOTO, OP_ICALL, OP_IJMP, OP_LONGJMP, OP_RET,
    Function, ProgramModel,
)

DEFAULT_DEPTH_LIMIT = 64


@dataclass(frozen=True)
class LoopInfo:
    loop_id: int
    function: str
    body_start: int                 # header, first body instruction
    entry_point: int | None         # immediate dominator of the header
    body_ends: frozenset[int]       # latches, one body end per back edge source
    exit_points: frozenset[int]     # targets of edges leaving the loop
    body: frozenset[int]
    parent: int | None = None
    reducible: bool = True


@dataclass(frozen=True)
class RecursionInfo:
    function: str
    start: int                              # function entry
    return_points: frozenset[int]
    internal_sites: tuple[int, ...]         # self-call sites
    external_call_sites: frozenset[int]
    call_after_points: frozenset[int]
    address_taken: bool = False
    foldable: bool | None = None

    @property
    def return_point(self) -> int | None:
        return next(iter(self.return_points)) if len(self.return_points) == 1 else None


def function_graph(m: ProgramModel, f: Function) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from(f.nodes)
    for a in f.nodes:
        for b in m.intra_succs(a):
            g.add_edge(a, b)
    return g


def dominators(g: nx.DiGraph, entry: int) -> dict[int, int]:
    """Immediate dominators of nodes reachable from ``entry``."""
    return nx.immediate_dominators(g, entry)


def _dominates(idom: dict[int, int], a: int, b: int) -> bool:
    while True:
        if a == b:
            return True
        p = idom.get(b)
        if p is None or p == b:
            return False
        b = p


def _natural_body(g: nx.DiGraph, header: int, latches: set[int]) -> set[int]:
    body = {header}
    work = [u for u in latches if u != header]
    body.update(work)
    while work:
        n = work.pop()
        for p in g.predecessors(n):
            if p not in body:
                body.add(p)
                work.append(p)
    return body


def detect_loops(m: ProgramModel) -> list[LoopInfo]:
    """Natural loops via dominators; irreducible cycles reported with reducible=False."""
    found: list[tuple] = []
    for f in m.functions:
        g = function_graph(m, f)
        idom = dominators(g, f.entry)
        reach = set(idom)
        back: dict[int, set[int]] = {}
        for u, v in g.edges:
            if u in reach and _dominates(idom, v, u):
                back.setdefault(v, set()).add(u)
        for h in sorted(back):
            body = _natural_body(g, h, back[h])
            exits = {v for u in body for v in g.successors(u) if v not in body}
            ent = idom.get(h)
            found.append((f, h, None if ent is None or ent == h else ent,
                          frozenset(back[h]), frozenset(exits), frozenset(body), True))
        # retreating edges whose target does not dominate the source
        sub = g.subgraph(reach)
        irreducible_heads = set()
        on_stack: set[int] = set()
        for u, v, d in nx.dfs_labeled_edges(sub, f.entry):
            if d == "forward":
                on_stack.add(v)
            elif d == "reverse":
                on_stack.discard(v)
            elif v in on_stack and not _dominates(idom, v, u):
                irreducible_heads.add(v)
        if irreducible_heads:
            sccs = [c for c in nx.strongly_connected_components(sub) if len(c) > 1]
            for c in sccs:
                heads = sorted(c & irreducible_heads)
                if not heads:
                    continue
                exits = {v for u in c for v in g.successors(u) if v not in c}
                found.append((f, heads[0], None, frozenset(), frozenset(exits), frozenset(c), False))

    order = {f.name: i for i, f in enumerate(m.functions)}
    found.sort(key=lambda t: (order[t[0].name], not t[6], t[1]))
    loops = [LoopInfo(i, t[0].name, t[1], t[2], t[3], t[4], t[5], None, t[6]) for i, t in enumerate(found)]
    res = []
    for lp in loops:
        parents = [o for o in loops if o is not lp and o.reducible and o.function == lp.function
                   and lp.body < o.body]
        parent = min(parents, key=lambda o: len(o.body)).loop_id if parents else None
        res.append(replace(lp, parent=parent))
    return res


def loop_chains(m: ProgramModel, loops: list[LoopInfo]) -> dict[int, tuple[int, ...]]:
    """Node -> ids of reducible loops containing it, innermost first."""
    chains: dict[int, list[LoopInfo]] = {}
    for lp in loops:
        if lp.reducible:
            for a in lp.body:
                chains.setdefault(a, []).append(lp)
    return {a: tuple(lp.loop_id for lp in sorted(ls, key=lambda lp: len(lp.body)))
            for a, ls in chains.items()}


# -- recursion -------------------------------------------------------------


def detect_direct_recursion(m: ProgramModel) -> list[RecursionInfo]:
    """One record per function that directly calls its own entry."""
    taken = {t for ts in m.indirect_targets.values() for t in ts}
    res = []
    for f in m.functions:
        if f.name in m.library_functions:
            continue
        own = set(f.nodes)
        internal, external, after = [], set(), set()
        for site, ca in m.callers[f.entry]:
            op = m.ops[site]
            if op.op != OP_DCALL:
                continue
            if site in own:
                internal.append(site)
            else:
                external.add(site)
                after.add(ca)
        if not internal:
            continue
        rets = frozenset(a for a in f.nodes if m.ops[a].op == OP_RET)
        res.append(RecursionInfo(f.name, f.entry, rets, tuple(sorted(internal)),
                                 frozenset(external), frozenset(after), f.entry in taken))
    return res


class _Unfoldable(Exception):
    pass


def event_paths(m: ProgramModel, f: Function, start: int, stop: int,
                depth_limit: float = DEFAULT_DEPTH_LIMIT, limit: int = 2) -> set[tuple]:
    """Distinct event sequences on paths from ``start`` to the return point
    ``stop`` of ``f``, descending into callees.

    Raises _Unfoldable on depth exhaustion, cycles, re-entry of ``f`` or
    longjmp. Stops early once ``limit`` distinct sequences are known.
    """
    found: set[tuple] = set()
    on_path: set[tuple] = set()

    def walk(addr: int, stack: tuple, events: tuple, depth: int) -> None:
        if len(found) >= limit:
            return
        if depth > depth_limit:
            raise _Unfoldable("depth limit")
        state = (addr, stack)
        if state in on_path:
            raise _Unfoldable("cycle")
        op = m.ops[addr]
        if not stack and addr == stop:
            found.add(events)
            return
        on_path.add(state)
        try:
            if op.op in (OP_GOTO, OP_COND):
                for s in op.succs:
                    walk(s, stack, events, depth + 1)
            elif op.op == OP_DCALL:
                if op.library:
                    walk(op.call_after, stack, events, depth + 1)
                else:
                    if op.target == f.entry:
                        raise _Unfoldable("re-entry")
                    walk(op.target, stack + (op.call_after,), events + (("dcall", addr),), depth + 1)
            elif op.op == OP_ICALL:
                for t in op.succs:
                    if t == f.entry:
                        raise _Unfoldable("re-entry")
                    walk(t, stack + (op.call_after,), events + (("icall", addr, t),), depth + 1)
            elif op.op == OP_IJMP:
                for t in op.succs:
                    walk(t, stack, events + (("ijmp", addr, t),), depth + 1)
            elif op.op == OP_RET:
                if stack:
                    walk(stack[-1], stack[:-1], events + (("ret", addr, stack[-1]),), depth + 1)
            elif op.op == OP_LONGJMP:
                raise _Unfoldable("longjmp")
            # OP_HALT: path ends without reaching the return point
        finally:
            on_path.discard(state)

    walk(start, (), (), 0)
    return found


def classify_foldability(m: ProgramModel, r: RecursionInfo,
                         depth_limit: float = DEFAULT_DEPTH_LIMIT,
                         loops: list[LoopInfo] | None = None) -> RecursionInfo:
    """Set ``foldable``: true iff exactly one event path leads from the
    recursive call's call-after point to the return point."""
    f = m.by_name[r.function]
    if loops is None:
        loops = detect_loops(m)
    ok = len(r.internal_sites) == 1 and r.return_point is not None and not r.address_taken
    if ok:
        site = r.internal_sites[0]
        ok = not any(site in lp.body for lp in loops if lp.function == f.name)
    if ok:
        try:
            paths = event_paths(m, f, m.ops[site].call_after, r.return_point, depth_limit)
            ok = len(paths) == 1
        except (_Unfoldable, RecursionError):
            ok = False
    return replace(r, foldable=ok)


def analyze_recursions(m: ProgramModel, depth_limit: float = DEFAULT_DEPTH_LIMIT,
                       loops: list[LoopInfo] | None = None) -> list[RecursionInfo]:
    if loops is None:
        loops = detect_loops(m)
    return [classify_foldability(m, r, depth_limit, loops) for r in detect_direct_recursion(m)]

