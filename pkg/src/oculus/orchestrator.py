"""Observe / plan / execute / evaluate / self-correct session loop.

Loop rules:

* adherence failure (executed tool sequence != planned sequence) sends the
  session back to candidate selection and planning;
* a correct and complete verdict ends the session with a normal response;
* otherwise tools named in the evaluator feedback and absent from the plan are
  appended and only those are executed on the next pass;
* no such tools, or hitting ``retry_limit``, ends with the fallback response.

Adherence is computed here, never read from the evaluator's reply.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from . import FALLBACK_PREFIX
from .errors import ImageDecodeError, PlanningError, ToolError, ValidationError
from .gateway import ChatMessage, Gateway, ImageRef, Role, system, user
from .retrieval import DEFAULT_K, ContextBundle, Embedder, Index, RETRIEVAL_SYSTEM_PROMPT, retrieve
from .tools import (
    Modality,
    ModalityLabel,
    ToolId,
    ToolInvocation,
    ToolRegistry,
    ToolRunner,
    classify_modality,
    output_summary,
)
from .trace import EventBuffer

SELECTION_SYSTEM_PROMPT = (
    "ROLE: tool-selector. You assist an ophthalmology decision agent. From the available tools, "
    "name every tool that could provide evidence for the query given the observed image modalities. "
    "Reply with tool ids separated by commas, or NO_TOOLS if none apply."
)

DECISION_SYSTEM_PROMPT = (
    "ROLE: decision-agent. You plan an ophthalmic diagnostic workflow. Choose tools only from the "
    "candidate list, order them, bind each to an image index, and justify each choice.\n"
    "Reply with a fenced json block:\n"
    '```json\n{"tools": [{"tool": "<tool id>", "image": <image index>, "rationale": "<why>"}]}\n```\n'
    "If the question needs no tools, reply with a single line: NO_TOOLS: <reason>"
)

EVALUATOR_SYSTEM_PROMPT = (
    "ROLE: evaluation-agent. You are a senior ophthalmologist reviewing tool outputs for "
    "correctness and completeness against the query and the planned workflow. If evidence is "
    "missing, name the tool that should be run.\n"
    "Reply with a fenced json block:\n"
    '```json\n{"is_correct": true|false, "is_complete": true|false, "feedback": "<text>"}\n```'
)

GENERATOR_SYSTEM_PROMPT = (
    "ROLE: generator. You are a clinical ophthalmology expert. Integrate the knowledge context and "
    "every tool output into a final, evidence-based answer to the query."
)

PLAN_FORMAT_REMINDER = (
    "Your previous reply was rejected: {problem}. Reply again using exactly the required format: "
    'a fenced json block {{"tools": [{{"tool", "image", "rationale"}}]}} using only candidate tool ids, '
    "or NO_TOOLS: <reason>."
)

VERDICT_FORMAT_REMINDER = (
    'Your previous reply could not be parsed. Reply with only a fenced json block containing '
    '"is_correct", "is_complete" and "feedback".'
)


# --- domain types -----------------------------------------------------------

@dataclass(frozen=True)
class PlanStep:
    tool_id: ToolId
    rationale: str
    image: ImageRef

    def to_dict(self) -> dict:
        return {"tool": self.tool_id.value, "rationale": self.rationale, "image": self.image.path}


@dataclass
class PlannedWorkflow:
    candidates: frozenset[ToolId]
    sequence: list[PlanStep]
    planner_transcript: str = ""
    no_tools: bool = False

    def __post_init__(self):
        for step in self.sequence:
            if step.tool_id not in self.candidates:
                raise ValidationError(f"planned tool {step.tool_id.value} is not a candidate")
            if not step.rationale.strip():
                raise ValidationError(f"planned tool {step.tool_id.value} has no rationale")
        if not self.sequence and not self.no_tools:
            raise ValidationError("empty plan without a no-tools declaration")

    @property
    def tool_sequence(self) -> list[ToolId]:
        return [s.tool_id for s in self.sequence]

    def to_dict(self) -> dict:
        return {
            "candidates": sorted(t.value for t in self.candidates),
            "sequence": [s.to_dict() for s in self.sequence],
            "no_tools": self.no_tools,
        }


@dataclass(frozen=True)
class Verdict:
    is_correct: bool
    is_complete: bool
    is_followed: bool
    feedback: str = ""

    def __post_init__(self):
        if not (self.is_correct and self.is_complete and self.is_followed) and not self.feedback.strip():
            raise ValidationError("verdict feedback is required when any flag is false")

    def to_dict(self) -> dict:
        return {"is_correct": self.is_correct, "is_complete": self.is_complete,
                "is_followed": self.is_followed, "feedback": self.feedback}


@dataclass(frozen=True)
class FinalResponse:
    text: str
    fallback: bool
    trace_ref: str | None = None

    def __post_init__(self):
        if self.fallback != self.text.startswith(FALLBACK_PREFIX):
            raise ValidationError("fallback flag disagrees with the response prefix")


class Memory:
    """Append-only event list (the session memory buffer)."""

    def __init__(self, events: Iterable[dict] = ()):
        self._events: list[dict] = []
        for e in events:
            self.append(e)

    def append(self, event: Mapping) -> None:
        self._events.append(dict(event))

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self):
        return iter(tuple(self._events))

    @property
    def events(self) -> tuple[dict, ...]:
        return tuple(self._events)

    def summary(self, limit: int = 12) -> str:
        lines = []
        for e in self._events[-limit:]:
            kind = e.get("kind")
            if kind == "verdict":
                lines.append(f"- verdict: {json.dumps(e['verdict'])}")
            elif kind == "tool_error":
                lines.append(f"- tool error: {e['tool']}: {e['error']}")
            elif kind == "tool_result":
                lines.append(f"- ran {e['tool']} on {Path(e['image']).name}")
            elif kind == "plan":
                lines.append(f"- plan: {[s['tool'] for s in e['plan']['sequence']]}")
            elif kind == "observation":
                lines.append(f"- image {e['index']}: {e.get('modality')}")
        return "\n".join(lines) or "(empty)"


@dataclass
class SessionState:
    query: str
    images: tuple[ImageRef, ...]
    memory: Memory
    modalities: list[ModalityLabel] = field(default_factory=list)
    rag_ctx: ContextBundle | None = None
    turn: int = 0

    def modality_of(self, image: ImageRef) -> Modality:
        for img, lab in zip(self.images, self.modalities):
            if img == image:
                return lab.label
        return Modality.UNKNOWN


@dataclass
class SessionResult:
    final: FinalResponse
    state: SessionState
    iterations: int
    plan: PlannedWorkflow | None
    verdicts: list[Verdict]
    retry_limit_hit: bool = False


@dataclass
class OrchestratorConfig:
    retry_limit: int = 3
    use_rag: bool = True
    use_decision: bool = True
    use_evaluation: bool = True
    static_plan: list[str] | None = None
    rag_k: int = DEFAULT_K
    generator_system: str = GENERATOR_SYSTEM_PROMPT

    def __post_init__(self):
        if self.retry_limit < 1:
            raise ValidationError("retry_limit must be >= 1")
        if not self.use_decision and self.static_plan is None:
            raise ValidationError("tools without the decision stage need a static plan")


# --- parsing helpers ------------------------------------------------------------

_FENCED = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL | re.IGNORECASE)


def extract_json_block(text: str) -> Any:
    """Parse the first fenced block, else the outermost {...} span."""
    candidates = [m.group(1) for m in _FENCED.finditer(text)]
    s, e = text.find("{"), text.rfind("}")
    if s != -1 and e > s:
        candidates.append(text[s:e + 1])
    for c in candidates:
        try:
            return json.loads(c)
        except json.JSONDecodeError:
            continue
    raise ValueError("no parseable json block")


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.strip().lower() in ("true", "yes"):
        return True
    if isinstance(v, str) and v.strip().lower() in ("false", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def parse_verdict_reply(text: str) -> tuple[bool, bool, str]:
    block = extract_json_block(text)
    if not isinstance(block, dict):
        raise ValueError("verdict block is not an object")
    return _as_bool(block["is_correct"]), _as_bool(block["is_complete"]), str(block.get("feedback") or "")


def adherence(planned: Sequence[ToolId], executed: Sequence[ToolId]) -> bool:
    """Exact sequence equality, order and multiplicity."""
    return list(planned) == list(executed)


def adherence_feedback(planned: Sequence[ToolId], executed: Sequence[ToolId]) -> str:
    missing = Counter(planned) - Counter(executed)
    extra = Counter(executed) - Counter(planned)
    parts = []
    if missing:
        parts.append("tools scheduled but not executed: " + ", ".join(t.value for t in missing.elements()))
    if extra:
        parts.append("tools executed but not scheduled: " + ", ".join(t.value for t in extra.elements()))
    if not parts:
        parts.append("executed order differs from plan")
    return (f"Workflow not followed (planned {[t.value for t in planned]}, "
            f"executed {[t.value for t in executed]}); " + "; ".join(parts) + ".")


def infer_missing_tools(feedback: str, registry: ToolRegistry, planned: Sequence[ToolId]) -> list[ToolId]:
    """Tools mentioned in feedback that are not already planned, in mention order."""
    planned = set(planned)
    return [t for t in registry.mentions(feedback) if t not in planned]


def _render(messages: Sequence[ChatMessage]) -> list[dict]:
    return [{"role": m.role.value, "content": m.content, "images": [a.sha256 for a in m.attachments]}
            for m in messages]


# --- orchestrator -----------------------------------------------------------

class Orchestrator:
    def __init__(
        self,
        gateway: Gateway,
        agents: Mapping[str, Any],
        registry: ToolRegistry | None = None,
        runner: ToolRunner | None = None,
        index: Index | None = None,
        embedder: Embedder | None = None,
        config: OrchestratorConfig | None = None,
        trace=None,
        classifier: Callable | None = None,
    ):
        self.gateway = gateway
        self.agents = dict(agents)
        self.registry = registry or ToolRegistry()
        self.runner = runner or ToolRunner()
        self.index = index
        self.embedder = embedder
        self.config = config or OrchestratorConfig()
        self.trace = trace if trace is not None else EventBuffer()
        self.classifier = classifier
        if self.config.use_rag and index is None:
            raise ValidationError("RAG stage enabled but no index supplied")
        needed = ["generator"]
        if self.config.use_decision:
            needed.append("planner")
        if self.config.use_evaluation:
            needed.append("evaluator")
        missing = [r for r in needed if r not in self.agents]
        if missing:
            raise ValidationError(f"missing backend roles: {', '.join(missing)}")

    # recording

    def _record(self, state: SessionState | None, type_: str, stage: str, **data) -> None:
        self.trace.append_event(type_, stage, **data)
        if state is not None and type_ in ("observation", "plan", "tool_invocation", "tool_error",
                                           "verdict", "amend", "note"):
            state.memory.append({"kind": "tool_result" if type_ == "tool_invocation" else type_,
                                 "turn": state.turn, **data})

    def _ask(self, role: str, stage: str, messages: list[ChatMessage]) -> str:
        self.trace.append_event("prompt", stage, role=role, messages=_render(messages))
        completion = self.gateway.complete(self.agents[role], messages)
        self.trace.append_event("completion", stage, role=role, text=completion.text,
                                backend_id=completion.backend_id, cached=completion.cached,
                                metadata=completion.metadata)
        return completion.text

    # stages

    def observe(self, query: str, images: Sequence[ImageRef] = (), memory: Memory | None = None) -> SessionState:
        if not query or not query.strip():
            raise ValidationError("query must be non-empty")
        state = SessionState(query, tuple(images), memory if memory is not None else Memory())
        for i, img in enumerate(state.images):
            try:
                lab = classify_modality(img, self.classifier)
                state.modalities.append(lab)
                self._record(state, "observation", "observe", index=i, image=img.path,
                             modality=lab.label.value, confidence=lab.confidence)
            except ImageDecodeError as exc:
                state.modalities.append(ModalityLabel(Modality.UNKNOWN, 0.0))
                self._record(state, "observation", "observe", index=i, image=img.path,
                             modality=Modality.UNKNOWN.value, confidence=0.0, error=str(exc))
        return state

    def retrieve_context(self, query: str) -> ContextBundle:
        synth = None
        if "rag_synth" in self.agents:
            def synth(q: str, passages: str) -> str:
                return self._ask("rag_synth", "rag", [
                    system(RETRIEVAL_SYSTEM_PROMPT),
                    user(f"Query:\n{q}\n\nReference passages:\n{passages}"),
                ])
        bundle = retrieve(self.index, query, self.config.rag_k, self.embedder, synth)
        self.trace.append_event("retrieval", "rag", **bundle.to_dict())
        return bundle

    def _compatible_tools(self, state: SessionState) -> list[ToolId]:
        return self.registry.compatible(lab.label for lab in state.modalities)

    def _tool_catalog(self, state: SessionState, only: Iterable[ToolId] | None = None) -> str:
        only = set(only) if only is not None else None
        lines = []
        for d in self.registry:
            if only is not None and d.tool_id not in only:
                continue
            mods = "/".join(sorted(m.value for m in d.accepted_modalities))
            lines.append(f"- {d.tool_id.value} [{mods}]: {d.description}")
        return "\n".join(lines)

    def _image_listing(self, state: SessionState) -> str:
        if not state.images:
            return "(no images)"
        return "\n".join(f"[{i}] {Path(img.path).name}: {lab.label.value}"
                         for i, (img, lab) in enumerate(zip(state.images, state.modalities)))

    def select_candidates(self, state: SessionState) -> frozenset[ToolId]:
        compatible = self._compatible_tools(state)
        if not self.config.use_decision:
            chosen = [ToolId(t) for t in self.config.static_plan if ToolId(t) in compatible]
            self._record(None, "selection", "tools", candidates=[t.value for t in chosen], source="static_plan")
            return frozenset(chosen)
        if not compatible:
            self._record(None, "selection", "decision", candidates=[], source="no_compatible_tools")
            return frozenset()
        reply = self._ask("planner", "decision", [
            system(SELECTION_SYSTEM_PROMPT),
            user(f"Query:\n{state.query}\n\nImages:\n{self._image_listing(state)}\n\n"
                 f"Available tools:\n{self._tool_catalog(state)}\n\nMemory:\n{state.memory.summary()}"),
        ])
        if reply.strip().upper().startswith("NO_TOOLS"):
            chosen, source = [], "backend_no_tools"
        else:
            named = self.registry.mentions(reply)
            chosen = [t for t in named if t in compatible]
            source = "backend"
            if not named:
                chosen, source = list(compatible), "defaulted_to_compatible"
        self._record(None, "selection", "decision", candidates=[t.value for t in chosen], source=source)
        return frozenset(chosen)

    def _default_image(self, state: SessionState, tool: ToolId) -> ImageRef | None:
        d = self.registry.get(tool)
        for img, lab in zip(state.images, state.modalities):
            if d.accepts(lab.label):
                return img
        return None

    def _parse_plan(self, reply: str, state: SessionState, S: frozenset[ToolId]) -> PlannedWorkflow:
        if reply.strip().upper().startswith("NO_TOOLS"):
            return PlannedWorkflow(S, [], reply, no_tools=True)
        try:
            block = extract_json_block(reply)
        except ValueError:
            raise ValueError("no json plan block found") from None
        entries = block.get("tools") if isinstance(block, dict) else block
        if not isinstance(entries, list):
            raise ValueError("plan block has no 'tools' list")
        if not entries:
            raise ValueError("empty tool list without a NO_TOOLS declaration")
        steps = []
        for entry in entries:
            if isinstance(entry, str):
                entry = {"tool": entry}
            name = str(entry.get("tool", "")).strip()
            if name in self.registry:
                tid = ToolId(name)
            else:
                named = self.registry.mentions(name)
                if len(named) != 1:
                    raise ValueError(f"unknown tool {name!r}")
                tid = named[0]
            if tid not in S:
                raise ValueError(f"tool {tid.value} is not among the candidates {sorted(t.value for t in S)}")
            rationale = str(entry.get("rationale") or "").strip()
            if not rationale:
                raise ValueError(f"missing rationale for {tid.value}")
            idx = entry.get("image")
            if idx is None:
                img = self._default_image(state, tid)
                if img is None:
                    raise ValueError(f"no image suitable for {tid.value}")
            else:
                if not isinstance(idx, int) or not 0 <= idx < len(state.images):
                    raise ValueError(f"image index {idx!r} out of range")
                img = state.images[idx]
            steps.append(PlanStep(tid, rationale, img))
        return PlannedWorkflow(S, steps, reply)

    def decide_workflow(self, state: SessionState, S: frozenset[ToolId]) -> PlannedWorkflow:
        if not self.config.use_decision:
            steps = []
            for t in self.config.static_plan:
                tid = ToolId(t)
                img = self._default_image(state, tid) if tid in S else None
                if img is not None:
                    steps.append(PlanStep(tid, "static plan", img))
            plan = PlannedWorkflow(S, steps, "", no_tools=not steps)
            self._record(state, "plan", "tools", plan=plan.to_dict(), source="static_plan")
            return plan
        if not S:
            plan = PlannedWorkflow(S, [], "", no_tools=True)
            self._record(state, "plan", "decision", plan=plan.to_dict(), source="no_candidates")
            return plan
        rag = state.rag_ctx.synthesized_context if state.rag_ctx else "(none)"
        messages = [
            system(DECISION_SYSTEM_PROMPT),
            user(f"Query:\n{state.query}\n\nKnowledge context:\n{rag}\n\nImages:\n{self._image_listing(state)}\n\n"
                 f"Candidate tools:\n{self._tool_catalog(state, S)}\n\nMemory:\n{state.memory.summary()}"),
        ]
        transcript = []
        for attempt in range(2):
            reply = self._ask("planner", "decision", messages)
            transcript.append(reply)
            try:
                plan = self._parse_plan(reply, state, S)
            except ValueError as exc:
                self._record(None, "reask", "decision", attempt=attempt, problem=str(exc))
                if attempt == 1:
                    raise PlanningError(f"planner reply rejected twice: {exc}") from None
                messages = messages + [ChatMessage(Role.ASSISTANT, reply),
                                       user(PLAN_FORMAT_REMINDER.format(problem=exc))]
                continue
            plan.planner_transcript = "\n---\n".join(transcript)
            self._record(state, "plan", "decision", plan=plan.to_dict(), source="planner")
            return plan
        raise AssertionError("unreachable")  # pragma: no cover

    def execute_workflow(self, steps: Sequence[PlanStep], state: SessionState) -> tuple[list[ToolInvocation], str | None]:
        """Run steps in order; stop at the first tool error, keeping earlier results."""
        results = []
        for step in steps:
            desc = self.registry.get(step.tool_id)
            try:
                inv = self.runner.invoke_tool(desc, step.image, {"modality": state.modality_of(step.image)})
            except ToolError as exc:
                err = f"{type(exc).__name__}: {exc}"
                self._record(state, "tool_error", "tools", tool=step.tool_id.value, image=step.image.path, error=err)
                return results, err
            results.append(inv)
            self._record(state, "tool_invocation", "tools", tool=inv.tool_id.value, image=inv.image.path,
                         invocation=inv.to_dict())
        return results, None

    def evaluate(
        self,
        state: SessionState,
        results: Sequence[ToolInvocation],
        S: frozenset[ToolId],
        plan: PlannedWorkflow,
        executed: Sequence[ToolId],
        exec_error: str | None = None,
    ) -> Verdict:
        followed = adherence(plan.tool_sequence, executed)
        rag = state.rag_ctx.synthesized_context if state.rag_ctx else "(none)"
        body = (
            f"Query:\n{state.query}\n\nKnowledge context:\n{rag}\n\n"
            f"Candidate tools: {sorted(t.value for t in S)}\n"
            f"Planned sequence: {[t.value for t in plan.tool_sequence]}\n"
            f"Executed sequence: {[t.value for t in executed]}\n"
            f"Execution error: {exec_error or 'none'}\n\n"
            f"Tool outputs:\n{json.dumps([output_summary(r) for r in results], indent=1)}"
        )
        messages = [system(EVALUATOR_SYSTEM_PROMPT), user(body)]
        parsed = None
        for attempt in range(2):
            reply = self._ask("evaluator", "evaluation", messages)
            try:
                parsed = parse_verdict_reply(reply)
                break
            except (ValueError, KeyError) as exc:
                self._record(None, "reask", "evaluation", attempt=attempt, problem=str(exc))
                messages = messages + [ChatMessage(Role.ASSISTANT, reply), user(VERDICT_FORMAT_REMINDER)]
        if parsed is None:
            correct, complete, feedback = False, False, "evaluator parse failure"
        else:
            correct, complete, feedback = parsed
        if not followed:
            note = adherence_feedback(plan.tool_sequence, executed)
            if exec_error:
                note += f" Execution error: {exec_error}."
            feedback = f"{note} {feedback}".strip()
        if not (correct and complete and followed) and not feedback.strip():
            feedback = "evaluator flagged the results without giving feedback"
        verdict = Verdict(correct, complete, followed, feedback)
        self._record(state, "verdict", "evaluation", verdict=verdict.to_dict())
        return verdict

    def generate_response(
        self,
        state: SessionState,
        results: Sequence[ToolInvocation],
        fallback: bool = False,
        trace_ref: str | None = None,
    ) -> FinalResponse:
        rag = state.rag_ctx.synthesized_context if state.rag_ctx else "(none)"
        outputs = json.dumps([output_summary(r) for r in results], indent=1) if results else "(no tool outputs)"
        images = [a for a in state.images]
        text = self._ask("generator", "generate", [
            system(self.config.generator_system),
            user(f"{state.query}\n\nKnowledge context:\n{rag}\n\nTool outputs:\n{outputs}", images),
        ])
        if fallback:
            text = FALLBACK_PREFIX + text
        final = FinalResponse(text, fallback, trace_ref)
        self._record(None, "response", "generate", text=text, fallback=fallback)
        return final

    # the loop

    def run_session(self, query: str, images: Sequence[ImageRef] = (), trace_ref: str | None = None) -> SessionResult:
        cfg = self.config
        state = self.observe(query, images)
        if cfg.use_rag:
            state.rag_ctx = self.retrieve_context(query)

        verdicts: list[Verdict] = []
        plan: PlannedWorkflow | None = None
        S: frozenset[ToolId] = frozenset()
        results: list[ToolInvocation] = []
        executed: list[ToolId] = []
        cursor = 0
        replan = True

        for iteration in range(1, cfg.retry_limit + 1):
            state.turn = iteration
            if replan:
                S = self.select_candidates(state)
                plan = self.decide_workflow(state, S)
                results, executed, cursor, replan = [], [], 0, False

            new, error = self.execute_workflow(plan.sequence[cursor:], state)
            cursor = len(plan.sequence)
            results.extend(new)
            executed.extend(inv.tool_id for inv in new)

            if not cfg.use_evaluation:
                final = self.generate_response(state, results, trace_ref=trace_ref)
                return SessionResult(final, state, iteration, plan, verdicts)

            verdict = self.evaluate(state, results, S, plan, executed, error)
            verdicts.append(verdict)
            if not verdict.is_followed:
                replan = True
                continue
            if verdict.is_correct and verdict.is_complete:
                final = self.generate_response(state, results, trace_ref=trace_ref)
                return SessionResult(final, state, iteration, plan, verdicts)

            missing = infer_missing_tools(verdict.feedback, self.registry, plan.tool_sequence)
            added = []
            for tid in missing:
                img = self._default_image(state, tid)
                if img is None:
                    self._record(state, "note", "evaluation", message=f"no suitable image for missing tool {tid.value}")
                    continue
                added.append(PlanStep(tid, f"added after evaluator feedback: {verdict.feedback}", img))
            if not added:
                final = self.generate_response(state, results, fallback=True, trace_ref=trace_ref)
                return SessionResult(final, state, iteration, plan, verdicts)
            plan = PlannedWorkflow(plan.candidates | {s.tool_id for s in added}, plan.sequence + added,
                                   plan.planner_transcript, no_tools=False)
            S = plan.candidates
            self._record(state, "amend", "evaluation", added=[s.tool_id.value for s in added], plan=plan.to_dict())
            if iteration == cfg.retry_limit:
                # no turn left to evaluate, but the appended tools still run once so
                # the fallback answer can use their output
                new, _ = self.execute_workflow(plan.sequence[cursor:], state)
                cursor = len(plan.sequence)
                results.extend(new)

        self._record(state, "note", "evaluation", message=f"retry limit {cfg.retry_limit} reached")
        final = self.generate_response(state, results, fallback=True, trace_ref=trace_ref)
        return SessionResult(final, state, cfg.retry_limit, plan, verdicts, retry_limit_hit=True)
