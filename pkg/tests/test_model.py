import random

import pytest

from recfa.corpus import GenParams, generate_model
from recfa.model import (
    OP_COND, OP_DCALL, OP_GOTO, OP_HALT, OP_ICALL, OP_RET, ModelError, build_model, load_model,
    serialize_model,
)


def test_skip_call_has_four_functions(skip_call):
    assert {f.name for f in skip_call.functions} == {
        "compressedStreamEOF", "showFileNames", "cadvise", "cleanUpAndFail"}
    op = skip_call.ops[0x406416]
    assert op.op == OP_DCALL and op.target == 0x4062C1 and op.call_after == 0x40641B


def test_ops_resolution(loop_two_paths):
    assert loop_two_paths.ops[0x1000].op == OP_GOTO
    assert loop_two_paths.ops[0x1020].op == OP_COND
    assert set(loop_two_paths.ops[0x1020].succs) == {0x1030, 0x1040}
    assert loop_two_paths.ops[0x2000].op == OP_RET
    assert loop_two_paths.ops[0x1060].op == OP_HALT


def test_empty_model_rejected():
    with pytest.raises(ModelError, match="no functions"):
        load_model("# nothing\n")


def test_indirect_site_without_targets():
    text = "func main entry 10\nnode 14\nfunc f entry 20\nedge 10 20 indirect-call callafter 14\n"
    with pytest.raises(ModelError, match="missing target set"):
        load_model(text)


@pytest.mark.parametrize("text, needle", [
    ("func main entry 10\nedge 10 99 fallthrough\n", "dangling"),
    ("func main entry 10\nfunc f entry 10\n", "duplicate entry"),
    ("func main entry 0\n", "outside"),
    (f"func main entry {1 << 48:x}\n", "outside"),
    ("func main entry 10\nnode 14\nedge 10 14 direct-call\n", "callafter"),
    ("func main entry 10\nnode 14\nedge 10 14 teleport\n", "unknown edge kind"),
    ("func main entry 0x10\n", "0x prefix"),
    ("func main entry 10\nlibfunc nope\n", "not declared"),
])
def test_validation_errors(text, needle):
    with pytest.raises(ModelError, match=needle):
        load_model(text)


def test_parse_error_names_line():
    with pytest.raises(ModelError) as ei:
        load_model("func main entry 10\n\nnode zz\n")
    assert ei.value.line == 3
    assert "line 3" in str(ei.value)


def test_icall_op_and_library_flag():
    m = build_model(
        [("main", 0x10, [0x14, 0x18, 0x1C]), ("f", 0x20, []), ("g", 0x30, []), ("memcpy", 0x40, [])],
        [(0x10, 0x20, "indirect-call", 0x14), (0x10, 0x30, "indirect-call", 0x14),
         (0x14, 0x40, "direct-call", 0x18), (0x18, 0x1C, "fallthrough"),
         (0x20, 0x14, "return"), (0x30, 0x14, "return"), (0x40, 0x18, "return")],
        {0x10: [0x20, 0x30]}, ["memcpy"])
    assert m.ops[0x10].op == OP_ICALL and m.ops[0x10].succs == (0x20, 0x30)
    assert m.ops[0x14].library


@pytest.mark.parametrize("seed", range(40))
def test_serialize_roundtrip(seed):
    rng = random.Random(seed)
    m = generate_model(rng, GenParams(setjmp=seed % 3 == 0, n_funcs=rng.randint(2, 8)))
    text = serialize_model(m)
    back = load_model(text)
    assert back == m
    assert serialize_model(back) == text


def test_fixture_roundtrip(skip_call, loop_two_paths, rec_foldable, rec_unfoldable):
    for m in (skip_call, loop_two_paths, rec_foldable, rec_unfoldable):
        assert load_model(serialize_model(m)) == m
