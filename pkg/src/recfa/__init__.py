"""Control-flow attestation with call-site filtering, event folding and
greedy compression."""

from .analysis import classify_foldability, detect_direct_recursion, detect_loops
from .callsite import SkipMap, build_abstract_graph, build_skip_map, compute_skippable
from .condenser import greedy_compress, knot_expand, seal, tune_bound, unseal
from .events import Event
from .model import ModelError, ProgramModel, load_model, serialize_model
from .policy import ForwardMap, build_forward_map
from .prover import AttackSpec, fold_stream, interpret, run_prover
from .schedule import Schedule
from .verifier import Verdict, enforce, expand_skipped, verify_report

__version__ = "0.1.0"

__all__ = [
    "AttackSpec", "Event", "ForwardMap", "ModelError", "ProgramModel", "Schedule",
    "SkipMap", "Verdict", "build_abstract_graph", "build_forward_map", "build_skip_map",
    "classify_foldability", "compute_skippable", "detect_direct_recursion", "detect_loops",
    "enforce", "expand_skipped", "fold_stream", "greedy_compress", "interpret",
    "knot_expand", "load_model", "run_prover", "seal", "serialize_model", "tune_bound",
    "unseal", "verify_report",
]
