import json
import random
import zlib

import pytest
from hypothesis import given, settings, strategies as st

from conftest import FIXTURES
from recfa.condenser import (
    HEADER_SIZE, MAX_REP, STORE, ZLIB, Knot, ReportError, bound_gains, condense, decode_words,
    encode_words, expanded_length, greedy_compress, knot_expand, open_report, seal, tune_bound, unseal,
)
from recfa.events import DCALL, PAIR, Event


def test_first_example():
    p = ["e1", "e2", "e3", "e4", "e2", "e3", "e4", "e5"]
    assert greedy_compress(p, 4) == ["e1", Knot(2, 3), "e2", "e3", "e4", "e5"]
    assert knot_expand(["e1", Knot(2, 3), "e2", "e3", "e4", "e5"]) == p


def test_second_example_is_greedy_not_longest():
    p = "e1 e2 e1 e2 e3 e1 e2 e1 e2 e3".split()
    out = greedy_compress(p, 8)
    assert out == [Knot(2, 2), "e1", "e2", "e3", Knot(2, 2), "e1", "e2", "e3"]
    assert out != [Knot(2, 5), "e1", "e2", "e1", "e2", "e3"]


def test_no_repetition_is_identity():
    p = list(range(50))
    assert greedy_compress(p, 4) == p
    assert greedy_compress([], 4) == []


def test_run_at_end_of_input():
    assert greedy_compress(["a"] * 7, 2) == [Knot(7, 1), "a"]
    assert greedy_compress(["x", "a", "b", "a", "b"], 4) == ["x", Knot(2, 2), "a", "b"]


def test_bound_rejected():
    with pytest.raises(ValueError):
        greedy_compress([1, 2], 1)


def test_long_run_splits_knots():
    p = [7] * (MAX_REP + 1)
    out = greedy_compress(p, 2)
    knots = [k for k in out if isinstance(k, Knot)]
    assert len(knots) == 2 and all(2 <= k.n_rep <= MAX_REP for k in knots)
    assert expanded_length(out) == len(p)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 5), max_size=300), st.integers(2, 32))
def test_roundtrip_property(p, bound):
    stats = {}
    out = greedy_compress(p, bound, stats)
    assert knot_expand(out) == p
    knots = sum(isinstance(x, Knot) for x in out)
    assert len(out) - knots <= len(p)
    assert stats.get("comparisons", 0) <= 4 * (len(p) + 1) * bound


def test_adversarial_roundtrips():
    rng = random.Random(5)
    cases = [[0, 1] * 500, [0] * 999 + [1], list(range(10)) * 30 + [0, 0, 0],
             [rng.choice("ab") for _ in range(2000)], [0, 1, 0, 1, 2] * 40]
    for p in cases:
        for b in (2, 3, 4, 16, 32):
            assert knot_expand(greedy_compress(p, b)) == p


def events(n, seed):
    rng = random.Random(seed)
    pool = [Event(DCALL, 0x400000 + 4 * i) for i in range(5)] + \
           [Event(PAIR, 0x401000 + 4 * i, 0x402000 + 8 * i) for i in range(5)]
    return [rng.choice(pool) for _ in range(n)]


@pytest.mark.parametrize("cid", [STORE, ZLIB])
def test_seal_roundtrip(cid):
    p = events(3000, 1)
    items = greedy_compress(p, 4)
    words = encode_words(items)
    rep = unseal(seal(words, cid, 4, len(p)))
    assert rep.words.tolist() == words and rep.bound == 4 and rep.event_count == len(p)
    assert knot_expand(decode_words(words)) == p


def test_empty_report():
    data = condense([], 4, ZLIB)
    rep, items = open_report(data)
    assert rep.words.size == 0 and items == []


def test_corrupt_reports():
    data = condense(events(100, 2), 4, ZLIB)
    with pytest.raises(ReportError, match="magic"):
        unseal(b"XXXX" + data[4:])
    with pytest.raises(ReportError, match="truncated"):
        unseal(data[:HEADER_SIZE - 1])
    with pytest.raises(ReportError):
        unseal(data[:-3])
    with pytest.raises(ReportError, match="compressor"):
        unseal(data[:6] + b"\x09" + data[7:])
    with pytest.raises(ValueError):
        seal([], 9)


def test_zlib_bomb_rejected():
    payload = zlib.compress(bytes(8 * 10**6))
    hdr = seal([], ZLIB)[:HEADER_SIZE]
    bogus = hdr[:16] + (10**9).to_bytes(8, "little")
    with pytest.raises(ReportError):
        unseal(bogus + payload)


def test_event_count_checked():
    p = events(40, 3)
    words = encode_words(greedy_compress(p, 4))
    with pytest.raises(ReportError, match="header says"):
        open_report(seal(words, STORE, 4, len(p) + 1))
    with pytest.raises(ReportError, match="limit"):
        open_report(seal(words, STORE, 4, len(p)), max_events=10)


def test_malformed_knots():
    with pytest.raises(ReportError):
        expanded_length([Knot(2, 3), "a"])
    with pytest.raises(ReportError):
        expanded_length([Knot(1, 1), "a"])
    with pytest.raises(ReportError):
        expanded_length([Knot(2, 2), Knot(2, 1), "a", "b"])
    with pytest.raises(ReportError):
        decode_words([0x05 << 56])
    with pytest.raises(ReportError):
        decode_words([0x1000])


def test_tuning_hand_computed():
    rows = [("a", {2: (2.0, 1.0), 4: (4.0, 2.0)}), ("b", {2: (1.0, 1.0), 4: (2.0, 0.5)})]
    gains = bound_gains(rows)
    assert gains[2] == pytest.approx((0.5 + 0.0) / 2)
    assert gains[4] == pytest.approx((0.375 + 1.0) / 2)
    assert tune_bound(rows) == 4


def test_tuning_tie_prefers_smaller():
    assert tune_bound([("p", {8: (1.0, 1.0), 4: (1.0, 2.0), 16: (1.0, 0.1)})]) == 4


@pytest.mark.parametrize("rows", [
    [], [("p", {4: (2.0, 1.0)})], [("p", {4: (2.0, 0.0), 8: (2.0, 1.0)})],
    [("p", {4: (0.5, 1.0), 8: (2.0, 1.0)})], [("p", {4: (2, 1), 8: (2, 1)}), ("q", {4: (2, 1)})],
])
def test_tuning_rejects(rows):
    with pytest.raises(ValueError):
        bound_gains(rows)


def test_published_measurements_select_four():
    data = json.loads((FIXTURES / "bound_tuning.json").read_text())
    rows = [(n, {int(b): tuple(v) for b, v in r.items()}) for n, r in data["programs"].items()]
    assert len(rows) == 11
    assert tune_bound(rows) == 4
