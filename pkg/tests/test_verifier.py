import random

import pytest

from oracle import FORWARD_KINDS, RETURN_KINDS, attack_outcome, attack_specs, make_case, transparency_mismatch
from recfa.callsite import SkipMap, build_abstract_graph, build_skip_map, compute_skippable
from recfa.condenser import STORE, ReportError, condense
from recfa.events import DCALL, ICALL, IJMP, RET, Event
from recfa.policy import ForwardEntry, ForwardMap, build_forward_map
from recfa.prover import run_prover
from recfa.schedule import Schedule
from recfa.verifier import (
    BACKWARD_RETURN, FORWARD_TARGET, SECURE, STACK_UNDERFLOW, UNKNOWN_SITE, VIOLATION, enforce,
    expand_skipped, verify_report,
)

# a: direct call site, c: icall site with one target, j: ijmp site
F = ForwardMap({
    0xA0: ForwardEntry(0xA4, frozenset()),
    0xB0: ForwardEntry(0xB4, frozenset()),
    0xC0: ForwardEntry(0xC4, frozenset({0x500})),
    0xD0: ForwardEntry(None, frozenset({0xD8})),
})


def rules(v):
    return [(x.index, x.rule) for x in v.violations]


def test_skip_call_recovery(skip_call):
    g = build_abstract_graph(skip_call)
    scs = compute_skippable(g)
    M, F2 = build_skip_map(g, scs), build_forward_map(skip_call, scs)
    ret = Event(RET, 0x405F10, 0x406416)
    assert expand_skipped(ret, None, M, F2) == [0x406416]
    assert expand_skipped(Event(RET, 0x4062D0, 0x40641B), None, M, F2) == []
    assert 0x406416 in F2 and F2[0x406416].ca == 0x40641B


def test_benign_loop_two_paths(loop_two_paths):
    g = build_abstract_graph(loop_two_paths)
    scs = compute_skippable(g)
    sched = Schedule([(0x1020, 0x1030), (0x1050, 0x1010), (0x1020, 0x1040), (0x1050, 0x1060)])
    folded = run_prover(loop_two_paths, sched, scs=scs).events
    v = verify_report(condense(folded), build_forward_map(loop_two_paths, scs), build_skip_map(g, scs))
    assert v.status == SECURE and v.render() == "SECURE\n"


def test_forward_violation_names_edge():
    v = enforce([Event(ICALL, 0xC0, 0x999), Event(IJMP, 0xD0, 0x777)], F)
    assert v.status == VIOLATION
    assert [(x.rule, x.event.src, x.event.dst) for x in v.violations] == [
        (FORWARD_TARGET, 0xC0, 0x999), (FORWARD_TARGET, 0xD0, 0x777)]
    assert v.render().splitlines()[1] == "viol 0 forward-target c0 999"


def test_pop_search_skips_frames():
    evs = [Event(DCALL, 0xA0), Event(DCALL, 0xB0), Event(ICALL, 0xC0, 0x500), Event(RET, 0x600, 0xA4)]
    assert enforce(evs, F).status == SECURE
    # after the search only the bypassed frames are gone
    v = enforce(evs + [Event(RET, 0x600, 0xB4)], F)
    assert rules(v) == [(4, STACK_UNDERFLOW)]


def test_backward_and_underflow():
    v = enforce([Event(RET, 0x600, 0xA4), Event(DCALL, 0xA0), Event(RET, 0x600, 0xBAD)], F)
    assert rules(v) == [(0, STACK_UNDERFLOW), (2, BACKWARD_RETURN)]


def test_unknown_sites():
    v = enforce([Event(DCALL, 0x123), Event(DCALL, 0xC0), Event(ICALL, 0xA0, 0x5)], F)
    assert [x.rule for x in v.violations] == [UNKNOWN_SITE] * 3


def test_abort_on_first_and_indices_increase():
    evs = [Event(ICALL, 0xC0, 0x1), Event(ICALL, 0xC0, 0x2), Event(RET, 0, 0x3)]
    full = enforce(evs, F)
    idx = [x.index for x in full.violations]
    assert idx == sorted(set(idx)) and len(idx) == 3
    first = enforce(evs, F, abort_on_first=True)
    assert len(first.violations) == 1 and first.events_checked == 1


def test_depth_limit():
    with pytest.raises(ReportError, match="depth limit"):
        enforce([Event(DCALL, 0xA0)] * 10, F, depth_limit=5)
    assert enforce([Event(DCALL, 0xA0)] * 5, F, depth_limit=5).status == SECURE


def test_report_errors_propagate():
    data = condense([Event(DCALL, 0xA0)], 4, STORE)
    with pytest.raises(ReportError):
        verify_report(data[:-1], F, SkipMap())
    with pytest.raises(ReportError):
        verify_report(data, F, SkipMap(), max_events=0)


@pytest.mark.parametrize("seed", range(30))
def test_transparency_sample(seed):
    assert transparency_mismatch(make_case(seed)) is None


@pytest.mark.parametrize("seed", range(30))
def test_attack_sample(seed):
    c = make_case(seed)
    for spec, kind in attack_specs(c, random.Random(seed), FORWARD_KINDS + RETURN_KINDS):
        assert attack_outcome(c, spec, kind) is None
