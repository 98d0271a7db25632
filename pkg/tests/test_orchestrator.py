import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import FlakyStub, events, images, invoked, orchestrator
from oculus import FALLBACK_PREFIX
from oculus.errors import PlanningError, ValidationError
from oculus.orchestrator import (
    FinalResponse,
    Memory,
    OrchestratorConfig,
    PlannedWorkflow,
    PlanStep,
    Verdict,
    adherence,
    adherence_feedback,
    extract_json_block,
    infer_missing_tools,
    parse_verdict_reply,
)
from oculus.synthetic import plan_reply, verdict_reply
from oculus.tools import ToolId, ToolRegistry


def test_fallback_prefix_bytes():
    assert FALLBACK_PREFIX.encode() == b"No tools available to use, directly output the current response:\n"


def test_verdict_needs_feedback_when_flagged():
    with pytest.raises(ValidationError):
        Verdict(True, False, True, "")
    Verdict(True, True, True, "")


def test_final_response_prefix_invariant():
    with pytest.raises(ValidationError):
        FinalResponse("plain", fallback=True)
    with pytest.raises(ValidationError):
        FinalResponse(FALLBACK_PREFIX + "x", fallback=False)


def test_plan_subset_of_candidates(tmp_path):
    img = images(tmp_path)[0]
    with pytest.raises(ValidationError, match="not a candidate"):
        PlannedWorkflow(frozenset({ToolId.DIAGNOSE}), [PlanStep(ToolId.DR_SEVERITY, "why", img)])
    with pytest.raises(ValidationError, match="no-tools"):
        PlannedWorkflow(frozenset(), [])
    PlannedWorkflow(frozenset(), [], no_tools=True)


def test_memory_is_append_only():
    m = Memory()
    m.append({"kind": "note"})
    snapshot = m.events
    m.append({"kind": "note"})
    assert len(snapshot) == 1 and len(m) == 2
    assert not hasattr(m, "pop")


def test_config_requires_static_plan_without_decision():
    with pytest.raises(ValidationError):
        OrchestratorConfig(use_decision=False)
    with pytest.raises(ValidationError):
        OrchestratorConfig(retry_limit=0)


def test_extract_json_block_variants():
    assert extract_json_block('```json\n{"a": 1}\n```') == {"a": 1}
    assert extract_json_block('sure: {"a": 2} done') == {"a": 2}
    with pytest.raises(ValueError):
        extract_json_block("no json")


def test_parse_verdict_reply_strings():
    assert parse_verdict_reply('{"is_correct": "true", "is_complete": "no", "feedback": "x"}') == (True, False, "x")


tool_seqs = st.lists(st.sampled_from(list(ToolId)), max_size=6)


@given(tool_seqs, tool_seqs)
def test_adherence_is_equality(a, b):
    assert adherence(a, b) == (a == b)


def test_adherence_feedback_names_differences():
    msg = adherence_feedback([ToolId.DIAGNOSE, ToolId.DR_SEVERITY], [ToolId.DIAGNOSE])
    assert "dr_severity" in msg and "not executed" in msg


def test_infer_missing_excludes_planned():
    reg = ToolRegistry()
    fb = "run the lesion detection tool and the diagnose tool again"
    assert infer_missing_tools(fb, reg, [ToolId.DIAGNOSE]) == [ToolId.LESION_DETECT]


def test_happy_path(tmp_path):
    orch = orchestrator(tmp_path)
    res = orch.run_session("Any disease?", images(tmp_path))
    assert not res.final.fallback and res.final.text == "final answer"
    assert res.iterations == 1 and invoked(orch) == ["diagnose"]


def test_planner_reask_then_valid(tmp_path):
    orch = orchestrator(tmp_path, planner_rules=[("ROLE: decision-agent", "not json"),
                                                 ("ROLE: decision-agent", plan_reply([("diagnose", 0)]))])
    res = orch.run_session("q", images(tmp_path))
    assert len(events(orch, "reask")) == 1 and not res.final.fallback


def test_planner_fails_twice(tmp_path):
    orch = orchestrator(tmp_path, planner_default="gibberish")
    with pytest.raises(PlanningError):
        orch.run_session("q", images(tmp_path))


def test_plan_outside_candidates_rejected(tmp_path):
    # only OCT image: dr_severity is not a candidate
    orch = orchestrator(tmp_path, planner_rules=[("ROLE: decision-agent", plan_reply([("dr_severity", 0)])),
                                                 ("ROLE: decision-agent", plan_reply([("oct_localize", 0)]))])
    res = orch.run_session("q", images(tmp_path, ["OCT"]))
    assert invoked(orch) == ["oct_localize"]
    assert "not among the candidates" in events(orch, "reask")[0]["problem"]
    assert not res.final.fallback


def test_no_images_skips_planner(tmp_path):
    orch = orchestrator(tmp_path)
    res = orch.run_session("What is glaucoma?", [])
    prompts = [e for e in events(orch, "prompt") if e["role"] == "planner"]
    assert prompts == [] and invoked(orch) == []
    assert not res.final.fallback


def test_undecodable_image_becomes_unknown(tmp_path):
    bad = tmp_path / "bad_cfp.png"
    bad.write_bytes(b"junk")
    from oculus.gateway import ImageRef

    orch = orchestrator(tmp_path)
    res = orch.run_session("q", [ImageRef.from_path(bad)])
    obs = events(orch, "observation")[0]
    assert obs["modality"] == "unknown" and "error" in obs
    assert invoked(orch) == [] and not res.final.fallback


def test_tool_error_breaks_adherence_and_replans(tmp_path):
    orch = orchestrator(tmp_path, stub=FlakyStub({"diagnose": 1}))
    res = orch.run_session("q", images(tmp_path))
    assert res.verdicts[0].is_followed is False
    assert "diagnose" in res.verdicts[0].feedback
    assert len(events(orch, "plan")) == 2 and res.iterations == 2
    assert not res.final.fallback


def test_rag_context_reaches_planner(tmp_path):
    orch = orchestrator(tmp_path, use_rag=True)
    orch.run_session("diabetic retinopathy", images(tmp_path))
    plan_prompt = [e for e in events(orch, "prompt") if "ROLE: decision-agent" in e["messages"][0]["content"]][0]
    assert "synthesized knowledge" in plan_prompt["messages"][1]["content"]
    assert len(events(orch, "retrieval")) == 1


def test_static_plan_without_decision(tmp_path):
    orch = orchestrator(tmp_path, use_decision=False, use_evaluation=False,
                        static_plan=["dr_severity", "oct_localize", "diagnose"])
    res = orch.run_session("q", images(tmp_path))
    assert invoked(orch) == ["dr_severity", "diagnose"]  # oct_localize has no OCT image
    assert not [e for e in events(orch, "prompt") if e["role"] in ("planner", "evaluator")]
    assert not res.final.fallback


def test_evaluator_parse_failure_is_incomplete(tmp_path):
    orch = orchestrator(tmp_path, evaluator_default="garbage")
    res = orch.run_session("q", images(tmp_path))
    assert res.final.fallback  # no tool named in feedback -> fallback
    assert res.verdicts[0].feedback == "evaluator parse failure"


def test_generator_receives_images(tmp_path):
    orch = orchestrator(tmp_path)
    imgs = images(tmp_path)
    orch.run_session("q", imgs)
    gen = [e for e in events(orch, "prompt") if e["role"] == "generator"][0]
    assert gen["messages"][1]["images"] == [imgs[0].sha256]


def test_amend_keeps_verdict_feedback(tmp_path):
    orch = orchestrator(tmp_path, evaluator_rules=[
        ("ROLE: evaluation-agent", verdict_reply(True, False, "run lesion detection")),
        ("ROLE: evaluation-agent", verdict_reply()),
    ])
    res = orch.run_session("q", images(tmp_path))
    assert invoked(orch) == ["diagnose", "lesion_detect"]
    assert events(orch, "amend")[0]["added"] == ["lesion_detect"]
    assert res.plan.tool_sequence == [ToolId.DIAGNOSE, ToolId.LESION_DETECT]
