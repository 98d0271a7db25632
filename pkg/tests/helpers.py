"""Builders shared by the test modules."""

from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Sequence

from oculus.gateway import BackendProfile, Gateway
from oculus.orchestrator import Orchestrator, OrchestratorConfig
from oculus.retrieval import HashingEmbedder, SourceDocument, chunk_and_embed
from oculus.synthetic import plan_reply, verdict_reply, write_png, write_script
from oculus.tools import StubAdapter, ToolRegistry, ToolRunner
from oculus.trace import EventBuffer


def scripted(gw: Gateway, root: Path, role: str, rules=(), default="ok"):
    path = write_script(root / f"{role}.tsv", rules, default)
    return gw.register_backend(BackendProfile(role, "scripted", script=str(path)))


def images(root: Path, kinds: Sequence[str] = ("CFP",)):
    return [write_png(root / f"img{i}_{k.lower()}.png", k, seed=i) for i, k in enumerate(kinds)]


def tiny_index(texts: Sequence[str] = ("retina text about diabetic retinopathy", "glaucoma cup disc")):
    docs = [SourceDocument(f"doc{i}", t, "") for i, t in enumerate(texts)]
    return chunk_and_embed(docs, 1000, 200, HashingEmbedder())


def orchestrator(
    root: Path | None = None,
    planner_rules=(),
    planner_default: str | Sequence[str] = plan_reply([("diagnose", 0)]),
    evaluator_rules=(),
    evaluator_default: str | Sequence[str] = verdict_reply(),
    generator_default: str = "final answer",
    retry_limit: int = 3,
    use_rag: bool = False,
    use_decision: bool = True,
    use_evaluation: bool = True,
    static_plan=None,
    stub=None,
    selector_reply: str | None = None,
) -> Orchestrator:
    """Orchestrator over scripted planner/evaluator/generator backends.

    ``selector_reply`` answers the tool-selection call; by default the selector
    names no tools, so the candidates default to all compatible tools.
    """
    root = Path(root or tempfile.mkdtemp(prefix="oculus-"))
    gw = Gateway()
    agents = {}
    p_rules = list(planner_rules)
    if selector_reply is not None:
        p_rules.insert(0, ("ROLE: tool-selector", selector_reply))
    else:
        p_rules.insert(0, ("ROLE: tool-selector", "any of them"))
    agents["planner"] = scripted(gw, root, "planner", p_rules, planner_default)
    agents["evaluator"] = scripted(gw, root, "evaluator", evaluator_rules, evaluator_default)
    agents["generator"] = scripted(gw, root, "generator", (), generator_default)
    agents["rag_synth"] = scripted(gw, root, "rag_synth", (), "synthesized knowledge")
    cfg = OrchestratorConfig(retry_limit=retry_limit, use_rag=use_rag, use_decision=use_decision,
                             use_evaluation=use_evaluation, static_plan=static_plan)
    return Orchestrator(gw, agents, ToolRegistry(), ToolRunner(stub=stub or StubAdapter()),
                        index=tiny_index() if use_rag else None, embedder=HashingEmbedder(),
                        config=cfg, trace=EventBuffer())


def events(orch: Orchestrator, type_: str | None = None) -> list[dict]:
    evs = orch.trace.events
    return [e for e in evs if type_ is None or e["type"] == type_]


def invoked(orch: Orchestrator) -> list[str]:
    return [e["tool"] for e in events(orch, "tool_invocation")]


class FlakyStub(StubAdapter):
    """Stub adapter that fails the first ``failures[tool]`` calls of a tool."""

    def __init__(self, failures: dict[str, int], exc_type=None):
        super().__init__()
        from oculus.errors import ToolTimeout

        self.failures = dict(failures)
        self.exc_type = exc_type or ToolTimeout

    def __call__(self, descriptor, image, params):
        tid = descriptor.tool_id.value
        if self.failures.get(tid, 0) > 0:
            self.failures[tid] -= 1
            raise self.exc_type(f"{tid} timed out")
        return super().__call__(descriptor, image, params)


# lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def criterion(n: int, ok: bool, detail: str) -> bool:
    line = f"CRITERION {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok
