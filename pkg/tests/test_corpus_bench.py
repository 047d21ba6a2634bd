import pytest

from recfa.analysis import detect_loops
from recfa.bench import BenchReport, measure, throughput_case
from recfa.corpus import LOOP_HEAVY, GenParams, generate_case, seed_from_env
from recfa.model import serialize_model


def test_generation_is_deterministic():
    for seed in range(10):
        m1, s1 = generate_case(seed)
        m2, s2 = generate_case(seed)
        assert serialize_model(m1) == serialize_model(m2) and s1 == s2


def test_seed_env(monkeypatch):
    monkeypatch.delenv("RECFA_SEED", raising=False)
    assert seed_from_env(3) == 3
    monkeypatch.setenv("RECFA_SEED", "42")
    assert seed_from_env() == 42


@pytest.mark.parametrize("seed", range(10))
def test_loop_heavy_shape(seed):
    m, s = generate_case(seed, LOOP_HEAVY)
    loops = detect_loops(m)
    assert loops and all(lp.reducible and lp.function == "main" for lp in loops)
    assert all(len(m.indirect_targets[a]) <= 2 for a in m.indirect_targets)


def test_formulas():
    r = BenchReport("x", 4, ev_total=1000, ev_fold=100, ev_gr=50, t_instr=0.5, t_gr=0.5,
                    t_gr_inv=0.1, t_vrf=0.4, zs=2000)
    assert r.reduction == pytest.approx(0.95)
    assert r.e_speed == pytest.approx(1000)
    assert r.d_speed == pytest.approx(2000)
    assert r.v_speed == pytest.approx(200)
    assert r.rate == pytest.approx(2)
    assert r.as_dict()["reduction"] == pytest.approx(0.95)


def test_measure_throughput_case():
    m, s = throughput_case(800)
    r = measure("t", m, s)
    assert r.ev_total == 800 and r.ev_fold == 8 and r.status == "SECURE"
    # the raw stream has period 8 and the window stays below BOUND
    assert measure("t", m, s, bound=8, fold=False).ev_gr == 800
    raw = measure("t", m, s, bound=16, fold=False)
    assert raw.ev_fold == 800 and raw.ev_gr == 9


@pytest.mark.parametrize("seed", range(5))
def test_measure_generated(seed):
    m, s = generate_case(seed, GenParams(setjmp=seed % 2 == 1))
    r = measure(str(seed), m, s, bound=8)
    assert r.status == "SECURE" and r.ev_gr <= r.ev_fold <= r.ev_total
