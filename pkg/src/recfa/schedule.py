"""Decision tapes driving the interpreter.

Schedule file lines are ``take <src-hex> <dst-hex>``, consumed in order at
every multi-way conditional branch, indirect call and indirect jump, with
``repeat <n> {`` ... ``}`` blocks for loop trip counts.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

from .model import OP_HALT, OP_LONGJMP, OP_RET, ProgramModel


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Repeat:
    count: int
    body: tuple["Item", ...]


Item = Union[tuple[int, int], Repeat]


@dataclass
class Schedule:
    items: list[Item] = field(default_factory=list)

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return _walk(self.items)

    def decisions(self) -> list[tuple[int, int]]:
        return list(self)

    def serialize(self) -> str:
        out: list[str] = []
        _emit(self.items, out, "")
        return "".join(s + "\n" for s in out)

    @classmethod
    def parse(cls, text: str) -> "Schedule":
        stack: list[tuple[int, list[Item]]] = [(0, [])]
        for no, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "take" and len(tok) == 3:
                try:
                    stack[-1][1].append((int(tok[1], 16), int(tok[2], 16)))
                except ValueError:
                    raise ScheduleError(f"line {no}: bad address") from None
            elif tok[0] == "repeat" and len(tok) == 3 and tok[2] == "{":
                try:
                    n = int(tok[1])
                except ValueError:
                    raise ScheduleError(f"line {no}: bad repeat count") from None
                if n < 0:
                    raise ScheduleError(f"line {no}: negative repeat count")
                stack.append((n, []))
            elif tok == ["}"]:
                if len(stack) == 1:
                    raise ScheduleError(f"line {no}: unbalanced '}}'")
                n, body = stack.pop()
                stack[-1][1].append(Repeat(n, tuple(body)))
            else:
                raise ScheduleError(f"line {no}: expected 'take <src> <dst>', 'repeat <n> {{' or '}}'")
        if len(stack) != 1:
            raise ScheduleError("unterminated repeat block")
        return cls(stack[0][1])


def _walk(items: Sequence[Item]) -> Iterator[tuple[int, int]]:
    for it in items:
        if isinstance(it, Repeat):
            if all(not isinstance(b, Repeat) for b in it.body):
                body = it.body
                for _ in range(it.count):
                    yield from body
            else:
                for _ in range(it.count):
                    yield from _walk(it.body)
        else:
            yield it


def _emit(items: Sequence[Item], out: list[str], ind: str) -> None:
    for it in items:
        if isinstance(it, Repeat):
            out.append(f"{ind}repeat {it.count} {{")
            _emit(it.body, out, ind + "  ")
            out.append(f"{ind}}}")
        else:
            out.append(f"{ind}take {it[0]:x} {it[1]:x}")


class TapeDecider:
    """Replays a schedule, checking every decision against the model."""

    def __init__(self, schedule: Schedule | Sequence[tuple[int, int]]):
        self._it = iter(schedule)

    def choose(self, site: int, options: Sequence[int]) -> int:
        try:
            src, dst = next(self._it)
        except StopIteration:
            raise ScheduleError(f"schedule exhausted at {site:x}") from None
        if src != site:
            raise ScheduleError(f"schedule expects a decision at {src:x}, execution is at {site:x}")
        if dst not in options:
            raise ScheduleError(f"invalid successor {dst:x} at {site:x}")
        return dst

    def remaining(self) -> int:
        return sum(1 for _ in self._it)


INF = float("inf")


def exit_distances(m: ProgramModel) -> dict[int, float]:
    """Intra-procedural step distance from each node to a return or halt."""
    preds: dict[int, list[int]] = {a: [] for a in m.ops}
    dist: dict[int, float] = {a: INF for a in m.ops}
    q: deque[int] = deque()
    for a, op in m.ops.items():
        if op.op in (OP_RET, OP_HALT):
            dist[a] = 0
            q.append(a)
        elif op.op != OP_LONGJMP:
            for b in m.intra_succs(a):
                preds[b].append(a)
    while q:
        b = q.popleft()
        for a in preds[b]:
            if dist[a] == INF:
                dist[a] = dist[b] + 1
                q.append(a)
    return dist


class RandomDecider:
    """Seeded random decisions with loop trip targets and a fuel budget.

    While fuel lasts, branches are uniform; loops stay for a drawn number of
    trips. Once fuel runs out every decision heads for the nearest exit, so
    generated runs terminate. Decisions are recorded for replay.
    """

    def __init__(self, m: ProgramModel, loops=(), rng: random.Random | None = None,
                 fuel: int = 200, trips: tuple[int, int] = (1, 4)):
        self.rng = rng or random.Random(0)
        self.fuel = fuel
        self.trips = trips
        self.dist = exit_distances(m)
        self.taken: list[tuple[int, int]] = []
        self._inner: dict[int, object] = {}
        for lp in sorted((lp for lp in loops if lp.reducible), key=lambda lp: -len(lp.body)):
            for a in lp.body:
                self._inner[a] = lp
        self._count: dict[int, int] = {}
        self._target: dict[int, int] = {}

    def _nearest(self, options: Sequence[int]) -> int:
        return min(options, key=lambda o: self.dist.get(o, INF))

    def choose(self, site: int, options: Sequence[int]) -> int:
        rng = self.rng
        lp = self._inner.get(site)
        choice = None
        if lp is not None:
            stay = [o for o in options if o in lp.body]
            leave = [o for o in options if o not in lp.body]
            if stay and leave:
                lid = lp.loop_id
                if lid not in self._target:
                    self._target[lid] = rng.randint(*self.trips)
                    self._count[lid] = 0
                if self.fuel > 0 and self._count[lid] < self._target[lid]:
                    self._count[lid] += 1
                    choice = rng.choice(stay)
                else:
                    del self._target[lid]
                    choice = rng.choice(leave) if self.fuel > 0 else self._nearest(leave)
        if choice is None:
            if self.fuel > 0:
                choice = rng.choice(list(options))
            else:
                choice = self._nearest(options)
        self.fuel -= 1
        self.taken.append((site, choice))
        return choice

    def schedule(self) -> Schedule:
        return Schedule(list(self.taken))

