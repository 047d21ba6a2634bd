"""Runtime control-flow event records."""

from __future__ import annotations

from typing import NamedTuple

DCALL = "direct-call"
ICALL = "indirect-call"
IJMP = "indirect-jump"
RET = "return"
# a two-address event decoded from the wire; its kind is decided by the verifier
PAIR = "pair"


class Event(NamedTuple):
    kind: str
    src: int
    dst: int | None = None

    @property
    def is_pair(self) -> bool:
        return self.kind != DCALL

    def wire_key(self) -> tuple[int, int | None]:
        """Identity as seen on the wire, where pair kinds are not encoded."""
        return (self.src, self.dst)

    def __str__(self) -> str:
        if self.dst is None:
            return f"ev {self.kind} {self.src:x}"
        return f"ev {self.kind} {self.src:x} {self.dst:x}"


def dcall(site: int) -> Event:
    return Event(DCALL, site, None)


def parse_event_line(line: str) -> Event:
    tok = line.split()
    if tok[0] != "ev" or len(tok) not in (3, 4):
        raise ValueError(f"bad event line {line!r}")
    return Event(tok[1], int(tok[2], 16), int(tok[3], 16) if len(tok) == 4 else None)
