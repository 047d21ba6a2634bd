"""Greedy repetition compression, wire words and report framing."""

from __future__ import annotations

import struct
import zlib
from itertools import chain
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numba
import numpy as np

from .events import DCALL, PAIR, Event

DEFAULT_BOUND = 4
MAX_REP = (1 << 24) - 1
MAX_SZ = (1 << 32) - 1

TAG_SRC, TAG_DST, TAG_DCALL, TAG_KNOT = 0x00, 0x01, 0x02, 0x03
_TAG_SHIFT = 56
_ADDR_MASK = (1 << 48) - 1

MAGIC = b"RCFA"
VERSION = 1
STORE, ZLIB = 0, 1
_HEADER = struct.Struct("<4sHBBQQ")
HEADER_SIZE = _HEADER.size
# deflate cannot expand data by more than ~1032x
_ZLIB_MAX_RATIO = 1032


class ReportError(ValueError):
    """Corrupt, truncated or inconsistent report."""


class Knot(NamedTuple):
    n_rep: int
    sz_w: int

    def __str__(self) -> str:
        return f"<{self.n_rep},{self.sz_w}>"


# -- Algorithm kernel ---------------------------------------------------------


@numba.njit(cache=True)
def _greedy_kernel(p, bound):
    """Greedy window scan over interned ids.

    Output entries >= 0 are ids; a knot <n, s> is stored as -(n << 32 | s) - 1.
    Returns (output, length, comparisons).
    """
    n = p.shape[0]
    out = np.empty(n, dtype=np.int64)
    idx = 0
    steps = 0
    pos_w = 0
    while pos_w < n:
        n_rep = 0
        sz_w = 1
        while sz_w < bound:
            pos_chk = pos_w + sz_w * (n_rep + 1)
            if pos_chk + sz_w > n and n_rep == 0:
                break
            j = 0
            while j < sz_w and pos_chk + j < n:
                steps += 1
                if p[pos_w + j] != p[pos_chk + j]:
                    break
                j += 1
            if j == sz_w:
                n_rep += 1
            elif n_rep == 0:
                sz_w += 1
            else:
                out[idx] = -((np.int64(n_rep + 1) << 32) | sz_w) - 1
                idx += 1
                for k in range(sz_w):
                    out[idx] = p[pos_w + k]
                    idx += 1
                pos_w += sz_w * (n_rep + 1)
                n_rep = 0
                sz_w = 1
        # a run may end exactly at the end of the input
        if pos_w < n:
            out[idx] = p[pos_w]
            idx += 1
        pos_w += 1
    return out, idx, steps


def intern(seq: Sequence) -> tuple[np.ndarray, list]:
    """Map hashable items to dense ids in first-occurrence order."""
    ids: dict = {}
    table: list = []
    arr = np.empty(len(seq), dtype=np.int64)
    setdefault = ids.setdefault
    for i, x in enumerate(seq):
        k = setdefault(x, len(table))
        if k == len(table):
            table.append(x)
        arr[i] = k
    return arr, table


def _split_knot(n: int, sz: int) -> list[Knot]:
    """Runs longer than one knot word allows become consecutive knots."""
    out = []
    while n > 0:
        k = min(n, MAX_REP)
        if n - k == 1:          # a knot needs at least two repetitions
            k -= 1
        out.append(Knot(k, sz))
        n -= k
    return out


def greedy_compress(p: Sequence, bound: int = DEFAULT_BOUND, stats: dict | None = None) -> list:
    """Compress ``p`` into a list of items interleaved with :class:`Knot` markers."""
    if bound < 2:
        raise ValueError("BOUND must be at least 2")
    if not len(p):
        return []
    ids, table = intern(p)
    return greedy_compress_ids(ids, table, bound, stats)


def greedy_compress_ids(ids: np.ndarray, table: Sequence, bound: int = DEFAULT_BOUND,
                        stats: dict | None = None) -> list:
    """Like :func:`greedy_compress` for a stream already interned as ``table[ids]``."""
    if bound < 2:
        raise ValueError("BOUND must be at least 2")
    if not len(ids):
        return []
    out, n, steps = _greedy_kernel(np.ascontiguousarray(ids, dtype=np.int64), bound)
    if stats is not None:
        stats["comparisons"] = int(steps)
    out = out[:n]
    kpos = np.flatnonzero(out < 0)
    codes = -(out[kpos] + 1)
    if not len(kpos) or (codes >> 32).max() <= MAX_REP:
        # knots become extra table slots so one C-level map builds the list
        uniq, inv = np.unique(codes, return_inverse=True)
        ext = list(table)
        base = len(ext)
        ext.extend(Knot(c >> 32, c & MAX_SZ) for c in uniq.tolist())
        out = out.copy()
        out[kpos] = base + inv
        return list(map(ext.__getitem__, out.tolist()))
    res: list = []
    i = 0
    while i < n:
        v = int(out[i])
        if v >= 0:
            res.append(table[v])
            i += 1
            continue
        code = -(v + 1)
        reps, sz = code >> 32, code & MAX_SZ
        body = [table[int(x)] for x in out[i + 1:i + 1 + sz]]
        i += 1 + sz
        for k in _split_knot(reps, sz) if reps > MAX_REP else (Knot(reps, sz),):
            res.append(k)
            res.extend(body)
    return res


def _knots(items: Sequence) -> list[int]:
    """Positions of well-formed, non-overlapping knots; raises on bad structure."""
    kpos = [i for i, it in enumerate(items) if type(it) is Knot]
    limit = 0
    n = len(items)
    for i in kpos:
        k = items[i]
        if i < limit:
            raise ReportError("knot inside a knot body")
        if k.n_rep < 2 or k.sz_w < 1:
            raise ReportError(f"malformed knot {k}")
        limit = i + 1 + k.sz_w
        if limit > n:
            raise ReportError("knot span runs past the end of the stream")
    return kpos


def _length(items: Sequence, kpos: list[int]) -> int:
    return len(items) - len(kpos) + sum((items[i].n_rep - 1) * items[i].sz_w for i in kpos)


def expanded_length(items: Sequence) -> int:
    """Number of events ``items`` expands to; validates knot structure."""
    return _length(items, _knots(items))


def _checked(items: Sequence, max_events: int | None) -> list[int]:
    kpos = _knots(items)
    if max_events is not None:
        total = _length(items, kpos)
        if total > max_events:
            raise ReportError(f"stream expands to {total} events, limit {max_events}")
    return kpos


def iter_expand(items: Sequence, max_events: int | None = None) -> Iterator:
    """Streaming inverse of :func:`greedy_compress`."""
    kpos = _checked(items, max_events)
    i = 0
    for k in kpos:
        yield from items[i:k]
        body = items[k + 1:k + 1 + items[k].sz_w]
        for _ in range(items[k].n_rep):
            yield from body
        i = k + 1 + items[k].sz_w
    yield from items[i:]


def knot_expand(items: Sequence, max_events: int | None = None) -> list:
    kpos = _checked(items, max_events)
    out: list = []
    i = 0
    for k in kpos:
        out += items[i:k]
        out += items[k + 1:k + 1 + items[k].sz_w] * items[k].n_rep
        i = k + 1 + items[k].sz_w
    out += items[i:]
    return out


# -- wire words ---------------------------------------------------------------


def _item_words(it) -> tuple[int, ...]:
    if isinstance(it, Knot):
        if not (2 <= it.n_rep <= MAX_REP and 1 <= it.sz_w <= MAX_SZ):
            raise ValueError(f"knot {it} does not fit a word")
        return ((TAG_KNOT << _TAG_SHIFT) | (it.n_rep << 32) | it.sz_w,)
    if it.kind == DCALL:
        return ((TAG_DCALL << _TAG_SHIFT) | it.src,)
    return (it.src, (TAG_DST << _TAG_SHIFT) | it.dst)


def encode_words(items: Iterable) -> list[int]:
    items = items if isinstance(items, (list, tuple)) else list(items)
    # streams repeat a small alphabet: encode each distinct item once
    enc = {it: _item_words(it) for it in set(items)}
    return list(chain.from_iterable(map(enc.__getitem__, items)))


def decode_words(words: Sequence[int]) -> list:
    """Words back to events (pair kinds unresolved) and knots."""
    out: list = []
    app = out.append
    pairs: dict = {}
    singles: dict = {}
    i = 0
    n = len(words)
    while i < n:
        w = words[i]
        tag = w >> _TAG_SHIFT
        if tag == TAG_SRC:
            if w >> 48:
                raise ReportError(f"word {i}: reserved bits set")
            if i + 1 >= n or words[i + 1] >> _TAG_SHIFT != TAG_DST:
                raise ReportError(f"word {i}: source without a destination word")
            d = words[i + 1] & _ADDR_MASK
            if words[i + 1] >> 48 != TAG_DST << 8:
                raise ReportError(f"word {i + 1}: reserved bits set")
            key = (w, d)
            ev = pairs.get(key)
            if ev is None:
                ev = pairs[key] = Event(PAIR, w, d)
            app(ev)
            i += 2
            continue
        if tag == TAG_DCALL:
            if (w >> 48) & 0xFF:
                raise ReportError(f"word {i}: reserved bits set")
            ev = singles.get(w)
            if ev is None:
                ev = singles[w] = Event(DCALL, w & _ADDR_MASK)
            app(ev)
        elif tag == TAG_KNOT:
            app(Knot((w >> 32) & MAX_REP, w & MAX_SZ))
        else:
            raise ReportError(f"word {i}: unknown tag {tag:#x}")
        i += 1
    return out


# -- framing ------------------------------------------------------------------


@dataclass(frozen=True)
class Report:
    compressor_id: int
    bound: int
    event_count: int
    words: np.ndarray


def seal(words: Sequence[int] | np.ndarray, compressor_id: int = STORE, bound: int = DEFAULT_BOUND,
         event_count: int = 0) -> bytes:
    arr = np.asarray(words, dtype="<u8")
    raw = arr.tobytes()
    if compressor_id == STORE:
        payload = raw
    elif compressor_id == ZLIB:
        payload = zlib.compress(raw, 6)
    else:
        raise ValueError(f"unknown compressor id {compressor_id}")
    if not 0 <= bound < 256:
        raise ValueError("bound does not fit the header")
    return _HEADER.pack(MAGIC, VERSION, compressor_id, bound, event_count, len(arr)) + payload


def unseal(data: bytes) -> Report:
    if len(data) < HEADER_SIZE:
        raise ReportError("truncated header")
    magic, version, cid, bound, count, nwords = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ReportError("bad magic")
    if version != VERSION:
        raise ReportError(f"unsupported version {version}")
    payload = memoryview(data)[HEADER_SIZE:]
    need = nwords * 8
    if cid == STORE:
        if len(payload) != need:
            raise ReportError(f"payload has {len(payload)} bytes, header says {need}")
        raw = bytes(payload)
    elif cid == ZLIB:
        if need > _ZLIB_MAX_RATIO * len(payload) + 64:
            raise ReportError("word count inconsistent with payload size")
        d = zlib.decompressobj()
        try:
            raw = d.decompress(payload, need + 1)
            if len(raw) == need and not d.eof:
                raw += d.decompress(d.unconsumed_tail, 1)
        except zlib.error as e:
            raise ReportError(f"payload: {e}") from None
        if len(raw) != need or not d.eof or d.unused_data:
            raise ReportError("payload length does not match word count")
    else:
        raise ReportError(f"unknown compressor id {cid}")
    return Report(cid, bound, count, np.frombuffer(raw, dtype="<u8"))


def condense(events: Sequence[Event], bound: int = DEFAULT_BOUND, compressor_id: int = STORE,
             stats: dict | None = None) -> bytes:
    """Folded events to a sealed report."""
    items = greedy_compress(events, bound, stats)
    return seal(encode_words(items), compressor_id, bound, len(events))


def open_report(data: bytes, max_events: int | None = None) -> tuple[Report, list]:
    """Unseal and decode; checks the header event count against the knots."""
    rep = unseal(data)
    items = decode_words(rep.words.tolist())
    total = expanded_length(items)
    if total != rep.event_count:
        raise ReportError(f"stream expands to {total} events, header says {rep.event_count}")
    if max_events is not None and total > max_events:
        raise ReportError(f"stream expands to {total} events, limit {max_events}")
    return rep, items


def item_count(items: Sequence) -> int:
    """Events plus knots after compression (the compressed event count)."""
    return len(items)


# -- BOUND tuning -------------------------------------------------------------


def bound_gains(measurements: Sequence[tuple[str, Mapping[int, tuple[float, float]]]]) -> dict[int, float]:
    """Average (1 - 1/R) / T_gr per candidate BOUND."""
    if not measurements:
        raise ValueError("no programs")
    bounds = set(measurements[0][1])
    for name, row in measurements:
        if set(row) != bounds:
            raise ValueError(f"{name}: candidate BOUNDs differ between programs")
        for b, (r, t) in row.items():
            if t <= 0:
                raise ValueError(f"{name}: T_gr must be positive (BOUND {b})")
            if r < 1:
                raise ValueError(f"{name}: compression rate below 1 (BOUND {b})")
    if len(bounds) < 2:
        raise ValueError("need at least two candidate BOUNDs")
    return {b: sum((1 - 1 / row[b][0]) / row[b][1] for _, row in measurements) / len(measurements)
            for b in sorted(bounds)}


def tune_bound(measurements) -> int:
    gains = bound_gains(measurements)
    best = max(gains.values())
    return min(b for b, g in gains.items() if g == best)
