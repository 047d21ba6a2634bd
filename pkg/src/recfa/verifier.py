"""Verifier: skipped-call recovery and shadow-stack CFI enforcement."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

from .callsite import SkipMap
from .condenser import ReportError, iter_expand, open_report
from .events import DCALL, Event
from .policy import ForwardMap

SECURE = "SECURE"
VIOLATION = "VIOLATION"

FORWARD_TARGET = "forward-target"
BACKWARD_RETURN = "backward-return"
UNKNOWN_SITE = "unknown-site"
STACK_UNDERFLOW = "stack-underflow"


class Violation(NamedTuple):
    index: int
    event: Event
    rule: str
    detail: str = ""

    def line(self) -> str:
        dst = "-" if self.event.dst is None else f"{self.event.dst:x}"
        return f"viol {self.index} {self.rule} {self.event.src:x} {dst}"


@dataclass
class Verdict:
    violations: list[Violation] = field(default_factory=list)
    events_checked: int = 0

    @property
    def status(self) -> str:
        return VIOLATION if self.violations else SECURE

    def render(self) -> str:
        return "".join([f"{self.status}\n", *(v.line() + "\n" for v in self.violations)])


def _chains(key: int, pair: bool, M: SkipMap, F: ForwardMap) -> list[list[int]]:
    """All maximal skip chains starting from ``key``."""
    out: list[list[int]] = []

    def first_values(k: int, from_pair: bool) -> list[int]:
        vals = M.get(k)
        ent = F.get(k)
        if from_pair and ent is not None and ent.is_direct:
            # an indirect or return target that is itself a direct call site:
            # only the call at that very address can follow
            return [v for v in vals if v == k]
        return [v for v in vals if v != k]

    def walk(k: int, from_pair: bool, chain: list[int], seen: set[int]) -> None:
        nxt = [v for v in first_values(k, from_pair) if v not in seen]
        if not nxt:
            if chain:
                out.append(list(chain))
            return
        for v in nxt:
            chain.append(v)
            seen.add(v)
            walk(v, False, chain, seen)
            seen.discard(v)
            chain.pop()

    walk(key, pair, [], set())
    return out


def expand_skipped(e_i: Event, e_next: Event | None, M: SkipMap, F: ForwardMap) -> list[int]:
    """Skipped direct-call sites executed between ``e_i`` and ``e_next``."""
    pair = e_i.kind != DCALL
    key = e_i.dst if pair else e_i.src
    if key is None or key not in M.entries:
        return []
    for ch in _chains(key, pair, M, F):
        if e_next is None or e_next.kind == DCALL or e_next.src in F:
            return ch
        # e_next is a return: it must close the last recovered call
        ent = F.get(ch[-1])
        if ent is not None and ent.ca == e_next.dst:
            return ch
    return []


def recover(events: Iterable[Event], M: SkipMap, F: ForwardMap) -> Iterator[Event]:
    """Splice recovered skipped calls into the stream."""
    it = iter(events)
    cur = next(it, None)
    cache: dict[int, Event] = {}
    while cur is not None:
        nxt = next(it, None)
        yield cur
        if M.entries:
            for s in expand_skipped(cur, nxt, M, F):
                ev = cache.get(s)
                if ev is None:
                    ev = cache[s] = Event(DCALL, s)
                yield ev
        cur = nxt


def enforce(events: Iterable[Event], F: ForwardMap, M: SkipMap | None = None,
            abort_on_first: bool = False, depth_limit: int | None = None) -> Verdict:
    """Check a folded (or raw) stream against ``F`` with a shadow stack."""
    verdict = Verdict()
    viols = verdict.violations
    stack: list[int] = []
    push = stack.append
    fget = F.entries.get
    stream = recover(events, M, F) if M is not None and M.entries else events
    i = -1
    for i, ev in enumerate(stream):
        src = ev.src
        ent = fget(src)
        if ev.dst is None:
            if ent is None or ent.ca is None or ent.tgts:
                viols.append(Violation(i, ev, UNKNOWN_SITE, "not a direct call site"))
            else:
                push(ent.ca)
        elif ent is None:
            dst = ev.dst
            if not stack:
                viols.append(Violation(i, ev, STACK_UNDERFLOW, "return with an empty shadow stack"))
            elif stack[-1] == dst:
                stack.pop()
            else:
                k = len(stack) - 2
                while k >= 0 and stack[k] != dst:
                    k -= 1
                if k >= 0:
                    del stack[k:]
                else:
                    viols.append(Violation(i, ev, BACKWARD_RETURN, f"expected {stack[-1]:x}"))
                    stack.pop()
        elif ent.ca is None:
            if ev.dst not in ent.tgts:
                viols.append(Violation(i, ev, FORWARD_TARGET, "jump target outside the allowed set"))
        elif ent.tgts:
            if ev.dst not in ent.tgts:
                viols.append(Violation(i, ev, FORWARD_TARGET, "call target outside the allowed set"))
            push(ent.ca)
        else:
            viols.append(Violation(i, ev, UNKNOWN_SITE, "direct call site in a two-address event"))
        if viols and abort_on_first:
            break
        if depth_limit is not None and len(stack) > depth_limit:
            raise ReportError(f"shadow stack exceeds depth limit {depth_limit}")
    verdict.events_checked = i + 1
    return verdict


def verify_report(data: bytes, F: ForwardMap, M: SkipMap, abort_on_first: bool = False,
                  depth_limit: int | None = None, max_events: int | None = None) -> Verdict:
    """Unseal, expand knots and enforce; format problems raise ReportError."""
    _, items = open_report(data, max_events)
    return enforce(iter_expand(items), F, M, abort_on_first, depth_limit)
