"""Forward-edge policy mapping ``cs -> (ca, tgts)`` for the verifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

from .model import OP_DCALL, OP_ICALL, OP_IJMP, OP_LONGJMP, ProgramModel


class ForwardEntry(NamedTuple):
    ca: int | None
    tgts: frozenset[int]

    @property
    def is_direct(self) -> bool:
        return self.ca is not None and not self.tgts

    @property
    def is_icall(self) -> bool:
        return self.ca is not None and bool(self.tgts)

    @property
    def is_ijmp(self) -> bool:
        return self.ca is None


@dataclass
class ForwardMap:
    entries: dict[int, ForwardEntry] = field(default_factory=dict)

    def __contains__(self, cs: int) -> bool:
        return cs in self.entries

    def __getitem__(self, cs: int) -> ForwardEntry:
        return self.entries[cs]

    def get(self, cs: int) -> ForwardEntry | None:
        return self.entries.get(cs)

    def __len__(self) -> int:
        return len(self.entries)

    def serialize(self) -> str:
        out = []
        for cs in sorted(self.entries):
            e = self.entries[cs]
            ca = "-" if e.ca is None else f"{e.ca:x}"
            out.append(" ".join(["fwd", f"{cs:x}", ca, *(f"{t:x}" for t in sorted(e.tgts))]))
        return "".join(s + "\n" for s in out)

    @classmethod
    def parse(cls, text: str) -> "ForwardMap":
        fm = cls()
        for no, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) < 3 or tok[0] != "fwd":
                raise ValueError(f"line {no}: expected 'fwd <cs> <ca|-> <tgt>*'")
            cs = int(tok[1], 16)
            if cs in fm.entries:
                raise ValueError(f"line {no}: duplicate key {cs:x}")
            ca = None if tok[2] == "-" else int(tok[2], 16)
            fm.entries[cs] = ForwardEntry(ca, frozenset(int(t, 16) for t in tok[3:]))
        return fm


def build_forward_map(m: ProgramModel, scs: frozenset[int] | set[int] = frozenset()) -> ForwardMap:
    """Forward entries for every direct call (skipped ones included, their
    call-after points are pushed during recovery), indirect call, indirect
    jump and longjmp site."""
    fm = ForwardMap()
    setjmp_returns = frozenset(m.setjmp_returns)
    for a, op in sorted(m.ops.items()):
        if op.op == OP_DCALL and not op.library:
            fm.entries[a] = ForwardEntry(op.call_after, frozenset())
        elif op.op == OP_ICALL:
            fm.entries[a] = ForwardEntry(op.call_after, frozenset(m.indirect_targets[a]))
        elif op.op == OP_IJMP:
            fm.entries[a] = ForwardEntry(None, frozenset(m.indirect_targets[a]))
        elif op.op == OP_LONGJMP:
            fm.entries[a] = ForwardEntry(None, setjmp_returns)
    missing = set(scs) - set(fm.entries)
    if missing:
        raise ValueError(f"skipped sites without a direct call: {sorted(missing)}")
    return fm
