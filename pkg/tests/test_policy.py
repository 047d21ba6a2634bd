import random

import pytest

from recfa.callsite import build_abstract_graph, build_skip_map, compute_skippable
from recfa.corpus import GenParams, generate_case
from recfa.events import DCALL
from recfa.model import build_model
from recfa.policy import ForwardEntry, ForwardMap, build_forward_map
from recfa.prover import interpret


def test_skip_call_forward_entries(skip_call):
    F = build_forward_map(skip_call, {0x406416})
    assert F[0x406416] == ForwardEntry(0x40641B, frozenset())
    assert F[0x406411].ca == 0x406416
    assert F[0x406420].ca == 0x406425
    assert "fwd 406416 40641b\n" in F.serialize()


def test_indirect_jump_entry():
    m = build_model([("main", 0x10, [0x14, 0x18])],
                    [(0x10, 0x14, "indirect-jump"), (0x10, 0x18, "indirect-jump")],
                    {0x10: [0x14, 0x18]})
    F = build_forward_map(m)
    assert F[0x10] == ForwardEntry(None, frozenset({0x14, 0x18}))
    assert F[0x10].is_ijmp
    assert F.serialize() == "fwd 10 - 14 18\n"


def test_no_forward_edges():
    m = build_model([("main", 0x10, [0x14])], [(0x10, 0x14, "fallthrough")])
    assert len(build_forward_map(m)) == 0


def test_longjmp_targets_every_setjmp_return():
    m = build_model(
        [("main", 0x10, [0x14, 0x18, 0x1C]), ("setjmp", 0x40, []), ("longjmp", 0x50, []),
         ("f", 0x20, [0x24])],
        [(0x10, 0x40, "setjmp-call", 0x14), (0x40, 0x14, "return"),
         (0x14, 0x18, "cond-branch"), (0x14, 0x1C, "cond-branch"),
         (0x18, 0x20, "direct-call", 0x1C),
         (0x20, 0x50, "longjmp-call", 0x24)])
    F = build_forward_map(m)
    assert F[0x20] == ForwardEntry(None, frozenset({0x14}))
    assert F[0x10].ca == 0x14 and not F[0x10].tgts


def test_parse_roundtrip_and_errors():
    F = ForwardMap({0x10: ForwardEntry(0x14, frozenset()), 0x20: ForwardEntry(None, frozenset({1, 2}))})
    assert ForwardMap.parse(F.serialize()).entries == F.entries
    with pytest.raises(ValueError):
        ForwardMap.parse("fwd 10 14\nfwd 10 18\n")
    with pytest.raises(ValueError):
        ForwardMap.parse("skip 10 14\n")


@pytest.mark.parametrize("seed", range(40))
def test_every_forward_event_has_a_key(seed):
    m, s = generate_case(seed, GenParams(setjmp=seed % 3 == 0))
    g = build_abstract_graph(m)
    scs = compute_skippable(g)
    F = build_forward_map(m, scs)
    M = build_skip_map(g, scs)
    assert all(v in F for v in M.values())
    for e in interpret(m, s):
        op = m.ops[e.src].op
        if e.kind == DCALL or op in ("icall", "ijmp", "longjmp"):
            assert e.src in F
        else:
            assert e.src not in F
