"""Compiled execution backend for tape-driven runs.

Same semantics as :func:`recfa.prover.execute`, with events interned to
integer ids. The path stack is one flat buffer: frames are contiguous
segments, so merging a closed region only drops frame boundaries.

Any error (bad tape, step limit, marker imbalance) makes :func:`execute_ids`
return ``None``; callers rerun the Python interpreter, which raises the
precise exception.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .events import ICALL, IJMP, RET, Event
from .model import OP_ICALL, OP_IJMP, OP_LONGJMP, OP_RET
from .prover import (
    BODY_END, BODY_START, LOOP_ENTRY, LOOP_EXIT, REC_ENTRY, REC_EXIT, REC_RETURN, REC_START,
    AttackSpec, Plan,
)
from .schedule import Repeat, Schedule

M_LE, M_LS, M_LD, M_LX, M_RE, M_RS, M_RD, M_RX, M_NEXT = range(9)
_MK_CODE = {LOOP_ENTRY: M_LE, BODY_START: M_LS, BODY_END: M_LD, LOOP_EXIT: M_LX,
            REC_ENTRY: M_RE, REC_START: M_RS, REC_RETURN: M_RD, REC_EXIT: M_RX}

_UNKNOWN = -2       # tape address absent from the model


# -- fold primitives over the flat buffer -------------------------------------
# st = [buffer length, frame count, loop-stack length, region count]
# Arrays have fixed capacity: numba refcounts any array that may be
# reassigned inside a hot loop, so overflow aborts the run and the caller
# retries with larger capacities.

OK, BAD, OVF_BUF, OVF_FRAMES, OVF_REGIONS, OVF_CALLS, OVF_SETJMPS = range(7)


@numba.njit(cache=True)
def _dedup(buf, fs, bs, st, reuse):
    """Drop the top frame if it repeats a frame of the innermost region.

    With ``reuse`` the duplicate is emptied and kept as the next frame.
    Returns 1 on a duplicate.
    """
    nfr = st[1]
    base = bs[st[3] - 1]
    if nfr - 1 < base:
        return 0
    t0 = fs[nfr - 1]
    tl = st[0] - t0
    for k in range(base, nfr - 1):
        s0 = fs[k]
        if fs[k + 1] - s0 != tl:
            continue
        same = True
        for j in range(tl):
            if buf[s0 + j] != buf[t0 + j]:
                same = False
                break
        if same:
            st[0] = t0
            if not reuse:
                st[1] = nfr - 1
                st[2] -= 1
            return 1
    return 0


@numba.njit(cache=True)
def _mark(code, buf, fs, ls, bs, st):
    """Apply one marker; returns a status code."""
    if code == M_LE or code == M_RE:
        if st[2] + 2 > ls.shape[0]:
            return OVF_FRAMES
        if st[3] + 1 > bs.shape[0]:
            return OVF_REGIONS
        ls[st[2]] = -1
        st[2] += 1
        bs[st[3]] = st[1]
        st[3] += 1
        if code == M_LE:
            return OK
        code = M_LS
    if st[3] == 0:
        return BAD
    if code == M_LD:
        _dedup(buf, fs, bs, st, False)
        return OK
    if code == M_LX or code == M_RX:
        st[3] -= 1
        while ls[st[2] - 1] != -1:
            st[2] -= 1
        st[2] -= 1
        st[1] = bs[st[3]]
        return OK
    if code == M_LS or _dedup(buf, fs, bs, st, True) == 0:
        if st[1] + 1 > fs.shape[0] or st[2] + 1 > ls.shape[0]:
            return OVF_FRAMES
        fs[st[1]] = st[0]
        ls[st[2]] = st[1]
        st[1] += 1
        st[2] += 1
    return OK


@numba.njit(cache=True)
def _marks(lo, hi, mkc, buf, fs, ls, bs, st):
    for q in range(lo, hi):
        e = _mark(mkc[q], buf, fs, ls, bs, st)
        if e != OK:
            return e
    return OK


@numba.njit(cache=True)
def _tape_next(tk, ta, tb, ts, r_start, r_left):
    """Next (site, dst) of the tape program; site -1 when exhausted.
    ts = [position, repeat depth]."""
    n = tk.shape[0]
    while True:
        p = ts[0]
        if p >= n:
            return -1, -1
        k = tk[p]
        if k == 0:
            ts[0] = p + 1
            return ta[p], tb[p]
        if k == 1:          # repeat start: ta = count, tb = index of its end
            if ta[p] == 0 or tb[p] == p + 1:
                ts[0] = tb[p] + 1
            else:
                d = ts[1]
                r_start[d] = p + 1
                r_left[d] = ta[p]
                ts[1] = d + 1
                ts[0] = p + 1
        else:
            d = ts[1] - 1
            r_left[d] -= 1
            if r_left[d] > 0:
                ts[0] = r_start[d]
            else:
                ts[1] = d
                ts[0] = p + 1


@numba.njit(cache=True)
def _kernel(op, a1, a2, dev, resite, sjmp, nmk,
            soff, sdst, sev, smk, emk, xmk, cmk,
            roff, rca, rev, ljoff, ljca, ljev, lmoff, lmt, lmk,
            mkc, main, fold, tk, ta, tb, tdepth,
            atk_node, atk_occ, atk_ev, max_steps, caps):
    """Returns (buffer, length, emitted, skipped, steps, attacked, status)."""
    buf = np.empty(caps[0], dtype=np.int32)
    fs = np.empty(caps[1], dtype=np.int64)
    ls = np.empty(caps[1], dtype=np.int64)
    bs = np.empty(caps[2], dtype=np.int64)
    st = np.zeros(4, dtype=np.int64)
    fs[0] = 0
    st[1] = 1
    cap = caps[3]
    c_site = np.empty(cap, dtype=np.int64)
    c_func = np.empty(cap, dtype=np.int64)
    c_reg = np.empty(cap, dtype=np.bool_)
    c_root = np.empty(cap, dtype=np.bool_)
    c_act = np.empty(cap, dtype=np.int64)
    depth = 0
    sj_act = np.empty(caps[4], dtype=np.int64)
    sj_ca = np.empty(caps[4], dtype=np.int64)
    nsj = 0
    ts = np.zeros(2, dtype=np.int64)
    r_start = np.empty(max(tdepth, 1), dtype=np.int64)
    r_left = np.empty(max(tdepth, 1), dtype=np.int64)

    func = main
    in_region = False
    root = False
    act = 0
    next_act = 1
    pc = main
    emitted = 0
    skipped = 0
    steps = 0
    atk_seen = 0
    attacked = False
    pc_closed = False
    status = OK

    if fold:
        status = _marks(emk[pc, 0], emk[pc, 1], mkc, buf, fs, ls, bs, st)

    while status == OK:
        steps += 1
        if steps > max_steps:
            status = BAD
            break
        o = op[pc]
        # one step = markers A, dynamic marker A, event, dynamic marker B, markers B
        alo = 0
        ahi = 0
        ady = -1
        ev = -1
        bdy = -1
        blo = 0
        bhi = 0
        nxt = pc
        stop = False
        if o == 7:                                  # return
            alo = xmk[pc, 0]
            ahi = xmk[pc, 1]
            if in_region:
                ady = M_RD
            if depth == 0:
                pc_closed = True
                stop = True
            else:
                depth -= 1
                site = c_site[depth]
                ca = a2[site]
                if pc == atk_node:
                    atk_seen += 1
                if pc == atk_node and atk_seen == atk_occ:
                    ev = atk_ev
                    attacked = True
                    pc_closed = True
                    depth += 1
                    stop = True
                else:
                    for q in range(roff[pc], roff[pc + 1]):
                        if rca[q] == ca:
                            ev = rev[q]
                            break
                    if ev < 0:
                        status = BAD
                        break
                    if root:
                        bdy = M_RX
                    blo = cmk[site, 0]
                    bhi = cmk[site, 1]
                    func = c_func[depth]
                    in_region = c_reg[depth]
                    root = c_root[depth]
                    act = c_act[depth]
                    nxt = ca
        elif o == 1 or o == 4 or o == 5:            # tape decision
            site, dst = _tape_next(tk, ta, tb, ts, r_start, r_left)
            if site != pc:
                status = BAD
                break
            j = -1
            for q in range(soff[pc], soff[pc + 1]):
                if sdst[q] == dst:
                    j = q
                    break
            if j < 0:
                status = BAD
                break
            nxt = dst
            if o == 1:
                alo = smk[j, 0]
                ahi = smk[j, 1]
            else:
                if pc == atk_node:
                    atk_seen += 1
                if pc == atk_node and atk_seen == atk_occ:
                    ev = atk_ev
                    attacked = True
                    stop = True
                elif o == 5:
                    ev = sev[j]
                    blo = smk[j, 0]
                    bhi = smk[j, 1]
                else:
                    ev = sev[j]
                    if depth == cap:
                        status = OVF_CALLS
                        break
                    c_site[depth] = pc
                    c_func[depth] = func
                    c_reg[depth] = in_region
                    c_root[depth] = root
                    c_act[depth] = act
                    depth += 1
                    in_region = False
                    root = False
                    func = dst
                    act = next_act
                    next_act += 1
                    blo = emk[dst, 0]
                    bhi = emk[dst, 1]
        elif o == 2:                                # direct call
            target = a1[pc]
            re = resite[pc]
            if re:
                ady = M_RE
            ev = dev[pc]
            if ev < 0:
                skipped += 1
            if sjmp[pc]:
                if nsj == sj_act.shape[0]:
                    status = OVF_SETJMPS
                    break
                sj_act[nsj] = act
                sj_ca[nsj] = a2[pc]
                nsj += 1
            if depth == cap:
                status = OVF_CALLS
                break
            c_site[depth] = pc
            c_func[depth] = func
            c_reg[depth] = in_region
            c_root[depth] = root
            c_act[depth] = act
            depth += 1
            in_region = re or (in_region and target == func)
            root = re
            func = target
            act = next_act
            next_act += 1
            if in_region:
                bdy = M_RS
            blo = emk[target, 0]
            bhi = emk[target, 1]
            nxt = target
        elif o == 0 or o == 3:                      # goto, library call
            nxt = a1[pc]
            alo = nmk[pc, 0]
            ahi = nmk[pc, 1]
        elif o == 6:                                # longjmp
            while nsj > 0:
                want = sj_act[nsj - 1]
                live = want == act
                for q in range(depth):
                    if c_act[q] == want:
                        live = True
                        break
                if live:
                    break
                nsj -= 1
            if pc == atk_node:
                atk_seen += 1
            if pc == atk_node and atk_seen == atk_occ:
                ev = atk_ev
                attacked = True
                stop = True
            elif nsj == 0:
                stop = True
            else:
                target = sj_ca[nsj - 1]
                for q in range(ljoff[pc], ljoff[pc + 1]):
                    if ljca[q] == target:
                        ev = ljev[q]
                        break
                if ev < 0:
                    status = BAD
                    break
                if st[0] == buf.shape[0]:
                    status = OVF_BUF
                    break
                buf[st[0]] = ev
                st[0] += 1
                emitted += 1
                ev = -1
                want = sj_act[nsj - 1]
                while act != want:
                    if fold:
                        status = _marks(xmk[pc, 0], xmk[pc, 1], mkc, buf, fs, ls, bs, st)
                        if status == OK and root:
                            status = _mark(M_RX, buf, fs, ls, bs, st)
                        if status != OK:
                            break
                    depth -= 1
                    pc = c_site[depth]
                    func = c_func[depth]
                    in_region = c_reg[depth]
                    root = c_root[depth]
                    act = c_act[depth]
                if status != OK:
                    break
                found = False
                for q in range(lmoff[pc], lmoff[pc + 1]):
                    if lmt[q] == target:
                        blo = lmk[q, 0]
                        bhi = lmk[q, 1]
                        found = True
                        break
                if not found:
                    status = BAD
                    break
                nxt = target
        else:                                       # halt
            stop = True

        if fold:
            if alo < ahi:
                status = _marks(alo, ahi, mkc, buf, fs, ls, bs, st)
            if ady >= 0 and status == OK:
                status = _mark(ady, buf, fs, ls, bs, st)
            if status != OK:
                break
        if ev >= 0:
            if st[0] == buf.shape[0]:
                status = OVF_BUF
                break
            buf[st[0]] = ev
            st[0] += 1
            emitted += 1
        if fold:
            if bdy >= 0:
                status = _mark(bdy, buf, fs, ls, bs, st)
            if blo < bhi and status == OK:
                status = _marks(blo, bhi, mkc, buf, fs, ls, bs, st)
            if status != OK:
                break
        if stop:
            break
        pc = nxt

    if fold and status == OK:
        # close every open region, innermost activation first
        while True:
            if not pc_closed:
                status = _marks(xmk[pc, 0], xmk[pc, 1], mkc, buf, fs, ls, bs, st)
            pc_closed = False
            if root and status == OK:
                status = _mark(M_RX, buf, fs, ls, bs, st)
            if depth == 0 or status != OK:
                break
            depth -= 1
            pc = c_site[depth]
            func = c_func[depth]
            in_region = c_reg[depth]
            root = c_root[depth]
            act = c_act[depth]
        if status == OK and st[3] != 0:
            status = BAD
    return buf, st[0], emitted, skipped, steps, attacked, status


# -- lowering -----------------------------------------------------------------


class _Marks:
    """Concatenated marker codes; ``add`` returns a (lo, hi) slice."""

    def __init__(self):
        self.codes: list[int] = []
        self._memo: dict[tuple, tuple[int, int]] = {}

    def add(self, seq) -> tuple[int, int]:
        if not seq:
            return (0, 0)
        key = tuple(seq)
        hit = self._memo.get(key)
        if hit is None:
            lo = len(self.codes)
            i = 0
            while i < len(seq):
                mk = seq[i]
                if mk.kind == BODY_END and i + 1 < len(seq) and seq[i + 1] == (BODY_START, mk.ident):
                    self.codes.append(M_NEXT)
                    i += 2
                else:
                    self.codes.append(_MK_CODE[mk.kind])
                    i += 1
            hit = self._memo[key] = (lo, len(self.codes))
        return hit


@dataclass
class Lowered:
    """A plan flattened to arrays over dense node ids."""
    index: dict[int, int]
    table: list[Event]
    arrays: tuple
    main: int


def _offsets(rows: list[list]) -> tuple[np.ndarray, list]:
    off = np.zeros(len(rows) + 1, dtype=np.int64)
    flat: list = []
    for i, r in enumerate(rows):
        flat.extend(r)
        off[i + 1] = len(flat)
    return off, flat


def lower(plan: Plan) -> Lowered:
    cached = getattr(plan, "_lowered", None)
    if cached is not None:
        return cached
    m = plan.model
    index = {a: i for i, a in enumerate(m.ops)}
    n = len(index)
    table: list[Event] = []
    event_ids: dict[Event, int] = {}

    def eid(ev: Event) -> int:
        k = event_ids.get(ev)
        if k is None:
            k = event_ids[ev] = len(table)
            table.append(ev)
        return k

    marks = _Marks()
    op = np.full(n, 8, dtype=np.int8)
    a1 = np.zeros(n, dtype=np.int64)
    a2 = np.zeros(n, dtype=np.int64)
    dev = np.full(n, -1, dtype=np.int64)
    resite = np.zeros(n, dtype=np.bool_)
    sjmp = np.zeros(n, dtype=np.bool_)
    nmk, emk, xmk, cmk = (np.zeros((n, 2), dtype=np.int64) for _ in range(4))
    succ_rows: list[list] = [[] for _ in range(n)]
    ret_rows: list[list] = [[] for _ in range(n)]
    lj_rows: list[list] = [[] for _ in range(n)]
    land_rows: list[list] = [[] for _ in range(n)]
    setjmp_cas = sorted({c[2] for c in plan.code.values() if c[0] == 2 and c[5]})

    def trans(a, b):
        d = plan.trans.get(a)
        return marks.add(d.get(b, ()) if d else ())

    for a, c in plan.code.items():
        i = index[a]
        k = c[0]
        op[i] = k
        xmk[i] = marks.add(plan.exit_marks.get(a, ()))
        if k in (0, 3):
            a1[i] = index[c[1]]
            nmk[i] = trans(a, c[1])
        elif k == 1:
            succ_rows[i] = [(index[s], -1, *trans(a, s)) for s in c[1]]
        elif k == 2:
            _, target, ca, ev, re_site, is_setjmp = c
            a1[i], a2[i] = index[target], index[ca]
            dev[i] = -1 if ev is None else eid(ev)
            resite[i], sjmp[i] = re_site, is_setjmp
            cmk[i] = trans(a, ca)
        elif k == 4:
            a2[i] = index[c[2]]
            succ_rows[i] = [(index[t], eid(c[3][t]), 0, 0) for t in c[1]]
            cmk[i] = trans(a, c[2])
        elif k == 5:
            succ_rows[i] = [(index[t], eid(c[2][t]), *trans(a, t)) for t in c[1]]
        elif k == 6:
            lj_rows[i] = [(index[t], eid(Event(IJMP, a, t))) for t in setjmp_cas]
        elif k == 7:
            ret_rows[i] = [(index[ca], eid(ev)) for ca, ev in c[1].items()]
    for f in m.functions:
        emk[index[f.entry]] = marks.add(plan.entry_marks.get(f.entry, ()))
    # markers for landing at a setjmp return point after unwinding
    by_func: dict[str, list[int]] = {}
    for t in setjmp_cas:
        by_func.setdefault(m.func_of[t].name, []).append(t)
    for name, targets in by_func.items():
        for u in m.by_name[name].nodes:
            if plan.code[u][0] in (2, 4, 6):
                land_rows[index[u]] = [(index[t], *marks.add(plan.edge_marks(u, t))) for t in targets]

    def col(rows, j):
        return np.array([r[j] for r in rows], dtype=np.int64)

    def span(rows, j):
        return np.array([r[j:j + 2] for r in rows], dtype=np.int64).reshape(-1, 2)

    soff, sflat = _offsets(succ_rows)
    roff, rflat = _offsets(ret_rows)
    ljoff, ljflat = _offsets(lj_rows)
    lmoff, lmflat = _offsets(land_rows)
    arrays = (op, a1, a2, dev, resite, sjmp, nmk,
              soff, col(sflat, 0), col(sflat, 1), span(sflat, 2), emk, xmk, cmk,
              roff, col(rflat, 0), col(rflat, 1), ljoff, col(ljflat, 0), col(ljflat, 1),
              lmoff, col(lmflat, 0), span(lmflat, 1),
              np.array(marks.codes or [0], dtype=np.int64))
    low = Lowered(index, table, arrays, index[m.main.entry])
    plan._lowered = low
    return low


def tape_program(schedule: Schedule, index: dict[int, int]):
    """Flatten a schedule to (kinds, a, b, max repeat depth)."""
    kinds: list[int] = []
    av: list[int] = []
    bv: list[int] = []
    deepest = 0

    def emit(items, depth):
        nonlocal deepest
        deepest = max(deepest, depth)
        for it in items:
            if isinstance(it, Repeat):
                at = len(kinds)
                kinds.append(1)
                av.append(it.count)
                bv.append(0)
                emit(it.body, depth + 1)
                bv[at] = len(kinds)
                kinds.append(2)
                av.append(0)
                bv.append(0)
            else:
                kinds.append(0)
                av.append(index.get(it[0], _UNKNOWN))
                bv.append(index.get(it[1], _UNKNOWN))

    emit(schedule.items, 0)
    return (np.array(kinds, dtype=np.int8), np.array(av, dtype=np.int64),
            np.array(bv, dtype=np.int64), deepest)


@dataclass
class IdRun:
    ids: np.ndarray         # emitted or folded event ids
    table: list[Event]
    ev_total: int
    steps: int
    attacked: bool
    skipped: int

    def events(self) -> list[Event]:
        t = self.table
        return [t[i] for i in self.ids.tolist()]


def execute_ids(plan: Plan, schedule: Schedule, fold: bool = True,
                attack: AttackSpec | None = None, max_steps: int = 10**9) -> IdRun | None:
    """Compiled run; ``None`` whenever the Python interpreter must decide."""
    low = lower(plan)
    m = plan.model
    table = low.table
    atk_node, atk_occ, atk_ev = -1, 0, -1
    if attack is not None:
        aop = m.ops.get(attack.site)
        if aop is None or attack.occurrence < 1 or aop.op not in (OP_ICALL, OP_IJMP, OP_RET, OP_LONGJMP):
            return None
        kind = {OP_RET: RET, OP_ICALL: ICALL, OP_LONGJMP: IJMP}.get(aop.op, IJMP)
        table = table + [Event(kind, attack.site, attack.forged_target)]
        atk_node, atk_occ, atk_ev = low.index[attack.site], attack.occurrence, len(table) - 1
    tk, ta, tb, tdepth = tape_program(schedule, low.index)
    caps = getattr(plan, "_caps", None)
    caps = np.array([1 << 16, 256, 64, 256, 16], dtype=np.int64) if caps is None else caps.copy()
    while True:
        buf, n, emitted, skipped, steps, attacked, status = _kernel(
            *low.arrays, low.main, fold, tk, ta, tb, tdepth, atk_node, atk_occ, atk_ev, max_steps, caps)
        if status < OVF_BUF:
            break
        caps[status - OVF_BUF] *= 8
    plan._caps = caps
    if status != OK:
        return None
    return IdRun(buf[:n], table, int(emitted), int(steps), bool(attacked), int(skipped))
