import json
import subprocess
import sys

import pytest

from conftest import FIXTURES
from recfa.callsite import SkipMap
from recfa.cli import EXIT_ERROR, EXIT_OK, EXIT_VIOLATION, main
from recfa.policy import ForwardMap
from recfa.schedule import Repeat, Schedule


@pytest.fixture
def loop_files(tmp_path):
    sched = Schedule([Repeat(49, ((0x1020, 0x1030), (0x1050, 0x1010), (0x1020, 0x1040), (0x1050, 0x1010))),
                      (0x1020, 0x1030), (0x1050, 0x1010), (0x1020, 0x1040), (0x1050, 0x1060)])
    s = tmp_path / "run.sched"
    s.write_text(sched.serialize())
    pol = tmp_path / "policy"
    assert main(["analyze", str(FIXTURES / "loop_two_paths.model"), "-o", str(pol)]) == EXIT_OK
    return FIXTURES / "loop_two_paths.model", s, pol


def kv(out):
    return dict(line.split(" ", 1) for line in out.splitlines() if " " in line)


def test_analyze_skip_call(tmp_path, capsys):
    assert main(["analyze", str(FIXTURES / "skip_call.model"), "-o", str(tmp_path)]) == EXIT_OK
    assert "skipped 1 of 3 direct calls" in capsys.readouterr().out
    assert SkipMap.parse((tmp_path / "skip.txt").read_text()).entries == {0x406416: [0x406416]}
    fm = ForwardMap.parse((tmp_path / "fwd.txt").read_text())
    assert fm.serialize() == (tmp_path / "fwd.txt").read_text()
    assert (tmp_path / "scs.txt").read_text() == "406416\n"


def test_analyze_no_direct_calls(tmp_path, capsys):
    mf = tmp_path / "m.model"
    mf.write_text("func main entry 10\nnode 14\nedge 10 14 fallthrough\n")
    assert main(["analyze", str(mf), "-o", str(tmp_path / "p")]) == EXIT_OK
    assert "reduction 0.0000" in capsys.readouterr().out


def test_attest_verify_roundtrip(loop_files, tmp_path, capsys):
    model, sched, pol = loop_files
    rep = tmp_path / "r.bin"
    dump = tmp_path / "raw.txt"
    assert main(["attest", str(model), str(sched), str(pol), "-o", str(rep), "--raw-dump", str(dump)]) == 0
    out = kv(capsys.readouterr().out)
    assert out["ev_total"] == "200" and out["ev_fold"] == "4"
    assert len(dump.read_text().splitlines()) == 200
    assert main(["verify", str(rep), str(pol)]) == EXIT_OK
    assert capsys.readouterr().out == "SECURE\n"

    assert main(["attest", str(model), str(sched), str(pol), "-o", str(rep), "--no-fold"]) == 0
    out = kv(capsys.readouterr().out)
    assert out["ev_fold"] == out["ev_total"] == "200"
    assert main(["verify", str(rep), str(pol)]) == EXIT_OK


def test_attest_is_deterministic(loop_files, tmp_path):
    model, sched, pol = loop_files
    a, b = tmp_path / "a", tmp_path / "b"
    main(["attest", str(model), str(sched), str(pol), "-o", str(a)])
    main(["attest", str(model), str(sched), str(pol), "-o", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_attacked_report_exits_2(tmp_path, capsys):
    mf = tmp_path / "m.model"
    mf.write_text("func main entry 10\nnode 14\nfunc f entry 20\n"
                  "edge 10 20 indirect-call callafter 14\nitargets 10 20\nedge 20 14 return\n")
    sf = tmp_path / "s.sched"
    sf.write_text("take 10 20\n")
    pol, rep = tmp_path / "p", tmp_path / "r"
    main(["analyze", str(mf), "-o", str(pol)])
    assert main(["attest", str(mf), str(sf), str(pol), "-o", str(rep), "--attack", "1:10:999"]) == 0
    assert "attack injected" in capsys.readouterr().out
    assert main(["verify", str(rep), str(pol)]) == EXIT_VIOLATION
    assert "viol 0 forward-target 10 999" in capsys.readouterr().out


def test_truncated_report_exits_1(loop_files, tmp_path, capsys):
    model, sched, pol = loop_files
    rep = tmp_path / "r.bin"
    main(["attest", str(model), str(sched), str(pol), "-o", str(rep)])
    rep.write_bytes(rep.read_bytes()[:-2])
    assert main(["verify", str(rep), str(pol)]) == EXIT_ERROR
    assert "report error" in capsys.readouterr().err
    assert main(["verify", str(tmp_path / "missing"), str(pol)]) == EXIT_ERROR


def test_bad_inputs(tmp_path, capsys):
    bad = tmp_path / "bad.model"
    bad.write_text("func main entry 10\nedge 10 zz fallthrough\n")
    assert main(["analyze", str(bad)]) == EXIT_ERROR
    assert "bad.model" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["attest", "m", "s", "p", "--attack", "nonsense"])
    with pytest.raises(SystemExit):
        main(["bench", "--bounds", "1,4"])


def test_bench_measurements_fixture(capsys):
    assert main(["bench", "--measurements", str(FIXTURES / "bound_tuning.json")]) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[-1] == "selected BOUND 4"


def test_bench_single_trivial_model(tmp_path, capsys):
    (tmp_path / "only.model").write_text("func main entry 10\n")
    assert main(["bench", str(tmp_path), "--bounds", "2,4"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("program\t") and out[1].startswith("only\t")


def test_gen_corpus_and_bench(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("RECFA_SEED", "11")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-corpus", str(a), "-n", "3", "--vary"]) == EXIT_OK
    assert main(["gen-corpus", str(b), "-n", "3", "--vary"]) == EXIT_OK
    for f in a.iterdir():
        assert f.read_text() == (b / f.name).read_text()
    capsys.readouterr()
    assert main(["bench", str(a), "--bounds", "2,4,8"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("\tSECURE") == 9 and "selected BOUND" in out


def test_entry_point_runs():
    r = subprocess.run([sys.executable, "-m", "recfa.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-corpus" in r.stdout
