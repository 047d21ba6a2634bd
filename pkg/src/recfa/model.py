"""CFG program model: the analysis substrate standing in for a disassembled binary.

A model file is UTF-8 and line oriented::

    func <name> entry <hex>
    node <hex>
    edge <src-hex> <dst-hex> <kind> [callafter <hex>]
    itargets <site-hex> <target-hex>...
    libfunc <name>
    # comment

``node`` lines belong to the most recent ``func``. A node without outgoing
edges halts the program.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

ADDR_LIMIT = 1 << 48

DIRECT_CALL = "direct-call"
INDIRECT_CALL = "indirect-call"
INDIRECT_JUMP = "indirect-jump"
RETURN = "return"
DIRECT_JUMP = "direct-jump"
COND_BRANCH = "cond-branch"
FALLTHROUGH = "fallthrough"
SETJMP_CALL = "setjmp-call"
LONGJMP_CALL = "longjmp-call"

EDGE_KINDS = frozenset({
    DIRECT_CALL, INDIRECT_CALL, INDIRECT_JUMP, RETURN, DIRECT_JUMP,
    COND_BRANCH, FALLTHROUGH, SETJMP_CALL, LONGJMP_CALL,
})
CALL_KINDS = frozenset({DIRECT_CALL, INDIRECT_CALL, SETJMP_CALL, LONGJMP_CALL})
INTRA_KINDS = frozenset({DIRECT_JUMP, COND_BRANCH, FALLTHROUGH})

# node terminator classes
OP_GOTO = "goto"
OP_COND = "cond"
OP_DCALL = "dcall"
OP_ICALL = "icall"
OP_IJMP = "ijmp"
OP_LONGJMP = "longjmp"
OP_RET = "ret"
OP_HALT = "halt"


class ModelError(ValueError):
    """Raised for unparsable or invalid model files."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class CfgEdge:
    src: int
    dst: int
    kind: str
    call_after: int | None = None


@dataclass(frozen=True)
class Function:
    name: str
    entry: int
    nodes: tuple[int, ...]


@dataclass(frozen=True)
class NodeOp:
    """Resolved terminator of one node."""

    op: str
    succs: tuple[int, ...] = ()
    target: int | None = None       # callee entry for direct calls
    call_after: int | None = None
    library: bool = False
    setjmp: bool = False


@dataclass(frozen=True, eq=True)
class ProgramModel:
    functions: tuple[Function, ...]
    edges: tuple[CfgEdge, ...]
    indirect_targets: Mapping[int, frozenset[int]] = field(default_factory=dict)
    library_functions: frozenset[str] = frozenset()

    def __post_init__(self):
        _validate(self)

    # -- derived indexes -------------------------------------------------

    @cached_property
    def func_of(self) -> dict[int, Function]:
        return {a: f for f in self.functions for a in f.nodes}

    @cached_property
    def by_name(self) -> dict[str, Function]:
        return {f.name: f for f in self.functions}

    @cached_property
    def by_entry(self) -> dict[int, Function]:
        return {f.entry: f for f in self.functions}

    @cached_property
    def out_edges(self) -> dict[int, list[CfgEdge]]:
        out: dict[int, list[CfgEdge]] = {a: [] for a in self.func_of}
        for e in self.edges:
            out[e.src].append(e)
        return out

    @cached_property
    def main(self) -> Function:
        return self.by_name.get("main", self.functions[0])

    @cached_property
    def library_entries(self) -> frozenset[int]:
        return frozenset(self.by_name[n].entry for n in self.library_functions)

    @cached_property
    def ops(self) -> dict[int, NodeOp]:
        return {a: _resolve_op(self, a, es) for a, es in self.out_edges.items()}

    @cached_property
    def setjmp_returns(self) -> frozenset[int]:
        return frozenset(e.call_after for e in self.edges if e.kind == SETJMP_CALL)

    @cached_property
    def callers(self) -> dict[int, list[tuple[int, int]]]:
        """Callee entry -> [(call site, call-after)] over non-library calls."""
        res: dict[int, list[tuple[int, int]]] = {f.entry: [] for f in self.functions}
        for a, op in sorted(self.ops.items()):
            if op.op == OP_DCALL and not op.library:
                res[op.target].append((a, op.call_after))
            elif op.op == OP_ICALL:
                for t in sorted(self.indirect_targets[a]):
                    res[t].append((a, op.call_after))
        return res

    def intra_succs(self, addr: int) -> tuple[int, ...]:
        """Successors of ``addr`` inside its own function (call-after for calls)."""
        op = self.ops[addr]
        if op.op in (OP_GOTO, OP_COND, OP_IJMP):
            return op.succs
        if op.op in (OP_DCALL, OP_ICALL):
            return (op.call_after,)
        return ()


def _resolve_op(m: ProgramModel, addr: int, es: list[CfgEdge]) -> NodeOp:
    if not es:
        return NodeOp(OP_HALT)
    kind = es[0].kind
    if kind in (FALLTHROUGH, DIRECT_JUMP):
        return NodeOp(OP_GOTO, (es[0].dst,))
    if kind == COND_BRANCH:
        return NodeOp(OP_COND, tuple(dict.fromkeys(e.dst for e in es)))
    if kind in (DIRECT_CALL, SETJMP_CALL):
        e = es[0]
        return NodeOp(OP_DCALL, target=e.dst, call_after=e.call_after,
                      library=e.dst in m.library_entries, setjmp=kind == SETJMP_CALL)
    if kind == LONGJMP_CALL:
        return NodeOp(OP_LONGJMP, target=es[0].dst, call_after=es[0].call_after)
    if kind == INDIRECT_CALL:
        return NodeOp(OP_ICALL, tuple(sorted(m.indirect_targets[addr])),
                      call_after=es[0].call_after)
    if kind == INDIRECT_JUMP:
        return NodeOp(OP_IJMP, tuple(sorted(m.indirect_targets[addr])))
    return NodeOp(OP_RET)


def _check_addr(a: int, what: str) -> None:
    if not 0 < a < ADDR_LIMIT:
        raise ModelError(f"{what} address {a:x} outside (0, 2^48)")


def _validate(m: ProgramModel) -> None:
    if not m.functions:
        raise ModelError("no functions")
    entries: set[int] = set()
    owner: dict[int, str] = {}
    for f in m.functions:
        _check_addr(f.entry, "entry")
        if f.entry in entries:
            raise ModelError(f"duplicate entry {f.entry:x}")
        entries.add(f.entry)
        if f.entry not in f.nodes:
            raise ModelError(f"entry {f.entry:x} of {f.name} is not one of its nodes")
        for a in f.nodes:
            _check_addr(a, "node")
            if a in owner:
                raise ModelError(f"node {a:x} declared twice ({owner[a]}, {f.name})")
            owner[a] = f.name
    names = [f.name for f in m.functions]
    if len(set(names)) != len(names):
        raise ModelError("duplicate function name")
    for n in m.library_functions:
        if n not in names:
            raise ModelError(f"library function {n} is not declared")

    by_src: dict[int, list[CfgEdge]] = {}
    for e in m.edges:
        if e.kind not in EDGE_KINDS:
            raise ModelError(f"unknown edge kind {e.kind}")
        for a in (e.src, e.dst):
            if a not in owner:
                raise ModelError(f"dangling edge {e.src:x}->{e.dst:x}: {a:x} is not a declared node")
        if (e.call_after is not None) != (e.kind in CALL_KINDS):
            raise ModelError(f"edge {e.src:x}->{e.dst:x}: callafter present iff call kind")
        if e.call_after is not None:
            if e.call_after not in owner:
                raise ModelError(f"dangling edge {e.src:x}: callafter {e.call_after:x} undeclared")
            if owner[e.call_after] != owner[e.src]:
                raise ModelError(f"callafter {e.call_after:x} outside the caller")
        if e.kind in (DIRECT_CALL, SETJMP_CALL, LONGJMP_CALL) and e.dst not in entries:
            raise ModelError(f"call {e.src:x} does not target a function entry")
        if e.kind in INTRA_KINDS | {INDIRECT_JUMP} and owner[e.dst] != owner[e.src]:
            raise ModelError(f"intra-procedural edge {e.src:x}->{e.dst:x} crosses functions")
        by_src.setdefault(e.src, []).append(e)

    for src, es in by_src.items():
        kinds = {e.kind for e in es}
        if len(kinds) > 1:
            raise ModelError(f"node {src:x} has mixed terminator kinds {sorted(kinds)}")
        kind = es[0].kind
        if kind in (FALLTHROUGH, DIRECT_JUMP, DIRECT_CALL, SETJMP_CALL, LONGJMP_CALL) and len(es) > 1:
            raise ModelError(f"node {src:x} has several {kind} edges")
        if kind in (INDIRECT_CALL, INDIRECT_JUMP):
            if src not in m.indirect_targets:
                raise ModelError(f"missing target set for indirect site {src:x}")
            if len({e.call_after for e in es}) > 1:
                raise ModelError(f"indirect call {src:x} has several call-after points")
            for e in es:
                if e.dst not in m.indirect_targets[src]:
                    raise ModelError(f"edge {src:x}->{e.dst:x} not in the site's target set")

    for site, tgts in m.indirect_targets.items():
        es = by_src.get(site)
        if not es or es[0].kind not in (INDIRECT_CALL, INDIRECT_JUMP):
            raise ModelError(f"itargets for {site:x}, which is not an indirect site")
        if not tgts:
            raise ModelError(f"empty target set for {site:x}")
        for t in tgts:
            if es[0].kind == INDIRECT_CALL and t not in entries:
                raise ModelError(f"indirect call target {t:x} is not a function entry")
            if es[0].kind == INDIRECT_JUMP and owner.get(t) != owner[site]:
                raise ModelError(f"indirect jump target {t:x} outside the site's function")


# -- text format ---------------------------------------------------------


def _hex(tok: str, line: int) -> int:
    try:
        v = int(tok, 16)
    except ValueError:
        raise ModelError(f"bad hex address {tok!r}", line) from None
    if tok.lower().startswith("0x"):
        raise ModelError(f"hex addresses take no 0x prefix: {tok!r}", line)
    return v


def load_model(text: str) -> ProgramModel:
    """Parse and validate a model file."""
    funcs: list[tuple[str, int, list[int]]] = []
    edges: list[CfgEdge] = []
    itargets: dict[int, frozenset[int]] = {}
    libs: list[str] = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        head = tok[0]
        if head == "func":
            if len(tok) != 4 or tok[2] != "entry":
                raise ModelError("expected: func <name> entry <hex>", no)
            entry = _hex(tok[3], no)
            funcs.append((tok[1], entry, [entry]))
        elif head == "node":
            if len(tok) != 2:
                raise ModelError("expected: node <hex>", no)
            if not funcs:
                raise ModelError("node before any func", no)
            a = _hex(tok[1], no)
            if a not in funcs[-1][2]:
                funcs[-1][2].append(a)
        elif head == "edge":
            if len(tok) not in (4, 6) or (len(tok) == 6 and tok[4] != "callafter"):
                raise ModelError("expected: edge <hex> <hex> <kind> [callafter <hex>]", no)
            if tok[3] not in EDGE_KINDS:
                raise ModelError(f"unknown edge kind {tok[3]!r}", no)
            ca = _hex(tok[5], no) if len(tok) == 6 else None
            edges.append(CfgEdge(_hex(tok[1], no), _hex(tok[2], no), tok[3], ca))
        elif head == "itargets":
            if len(tok) < 3:
                raise ModelError("expected: itargets <hex> <hex>...", no)
            site = _hex(tok[1], no)
            if site in itargets:
                raise ModelError(f"duplicate itargets for {site:x}", no)
            itargets[site] = frozenset(_hex(t, no) for t in tok[2:])
        elif head == "libfunc":
            if len(tok) != 2:
                raise ModelError("expected: libfunc <name>", no)
            libs.append(tok[1])
        else:
            raise ModelError(f"unknown directive {head!r}", no)
    return ProgramModel(
        functions=tuple(Function(n, e, tuple(ns)) for n, e, ns in funcs),
        edges=tuple(edges),
        indirect_targets=itargets,
        library_functions=frozenset(libs),
    )


def serialize_model(m: ProgramModel) -> str:
    out: list[str] = []
    for f in m.functions:
        out.append(f"func {f.name} entry {f.entry:x}")
        out.extend(f"node {a:x}" for a in f.nodes if a != f.entry)
    for e in m.edges:
        s = f"edge {e.src:x} {e.dst:x} {e.kind}"
        if e.call_after is not None:
            s += f" callafter {e.call_after:x}"
        out.append(s)
    for site in sorted(m.indirect_targets):
        out.append("itargets " + " ".join(f"{a:x}" for a in (site, *sorted(m.indirect_targets[site]))))
    out.extend(f"libfunc {n}" for n in sorted(m.library_functions))
    return "\n".join(out) + "\n"


def build_model(functions: Iterable[tuple[str, int, Iterable[int]]],
                edges: Iterable[tuple],
                indirect_targets: Mapping[int, Iterable[int]] | None = None,
                library_functions: Iterable[str] = ()) -> ProgramModel:
    """Convenience constructor from plain tuples; ``edges`` items are
    ``(src, dst, kind)`` or ``(src, dst, kind, call_after)``."""
    fs = []
    for name, entry, nodes in functions:
        ns = [entry] + [a for a in nodes if a != entry]
        fs.append(Function(name, entry, tuple(dict.fromkeys(ns))))
    return ProgramModel(
        functions=tuple(fs),
        edges=tuple(CfgEdge(*e) for e in edges),
        indirect_targets={k: frozenset(v) for k, v in (indirect_targets or {}).items()},
        library_functions=frozenset(library_functions),
    )
