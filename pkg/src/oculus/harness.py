"""Multiple-choice benchmark harness: question files, prompts, answer extraction,
metrics, and the ablation-configurable runner."""

from __future__ import annotations

import hashlib
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import OculusError, QuestionSchemaError, ValidationError
from .gateway import ChatMessage, Gateway, ImageRef, system, user
from .orchestrator import Orchestrator, OrchestratorConfig
from .retrieval import DEFAULT_K, Embedder, Index, RETRIEVAL_SYSTEM_PROMPT, retrieve
from .tools import ToolRegistry, ToolRunner
from .trace import EventBuffer, RunRecord, RunRecorder

QUESTIONS_FORMAT = "oculus-questions"
QUESTIONS_SCHEMA_VERSION = 1
ABSTAIN = "ABSTAIN"
ANSWER_DIRECTIVE = "Answer: <LETTER>"
LETTERS = "ABCDE"


class Track(str, Enum):
    A1 = "A1"
    A2 = "A2"


A1_SUBTYPES = ("categorical", "positional", "numerical", "diagnosis_type", "stage_level")
A2_SUBTYPES = ("instance", "pathological", "clinical_decision")
SUBTYPES = {Track.A1: A1_SUBTYPES, Track.A2: A2_SUBTYPES}

STAGES = ("rag", "tools", "decision", "evaluation")


@dataclass(frozen=True)
class QuestionItem:
    id: str
    track: Track
    subtype: str
    stem: str
    options: Mapping[str, str]
    gold: str
    images: tuple[ImageRef, ...] = ()
    source_dataset: str = ""
    context: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "track", Track(self.track))
        object.__setattr__(self, "options", dict(self.options))
        object.__setattr__(self, "images", tuple(self.images))
        if self.subtype not in SUBTYPES[self.track]:
            raise QuestionSchemaError(f"item {self.id}: unknown subtype {self.subtype!r} for track {self.track.value}")
        letters = list(self.options)
        if not 2 <= len(letters) <= 5:
            raise QuestionSchemaError(f"item {self.id}: expected 2-5 options, got {len(letters)}")
        if letters != list(LETTERS[:len(letters)]):
            raise QuestionSchemaError(f"item {self.id}: option letters must be contiguous from 'A'")
        if not self.gold:
            raise QuestionSchemaError(f"item {self.id}: missing gold")
        if self.gold not in self.options:
            raise QuestionSchemaError(f"item {self.id}: gold {self.gold!r} is not among options {letters}")
        if not self.stem.strip():
            raise QuestionSchemaError(f"item {self.id}: empty stem")

    @property
    def letters(self) -> list[str]:
        return list(self.options)

    def to_dict(self, base_dir: Path | None = None) -> dict:
        def rel(p: str) -> str:
            if base_dir is None:
                return p
            try:
                return str(Path(p).resolve().relative_to(base_dir.resolve()))
            except ValueError:
                return p

        d = {"id": self.id, "track": self.track.value, "subtype": self.subtype, "stem": self.stem,
             "options": dict(self.options), "gold": self.gold,
             "images": [{"path": rel(i.path), "sha256": i.sha256} for i in self.images],
             "source_dataset": self.source_dataset}
        if self.context is not None:
            d["context"] = self.context
        return d


@dataclass(frozen=True)
class Prediction:
    item_id: str
    raw_text: str
    extracted: str
    latency_ms: int = 0
    error: str | None = None


# --- question files ---------------------------------------------------------

def _parse_item(d: dict, base: Path, offset: int) -> QuestionItem:
    where = f"item at byte {offset}"
    if not isinstance(d, dict) or "id" not in d:
        raise QuestionSchemaError(f"{where}: missing id")
    where = f"item {d['id']!r}"
    if "gold" not in d or not d["gold"]:
        raise QuestionSchemaError(f"{where}: missing gold")
    opts = d.get("options")
    if isinstance(opts, list):
        opts = {LETTERS[i]: str(t) for i, t in enumerate(opts[:5])} if len(opts) <= 5 else None
    if not isinstance(opts, dict):
        raise QuestionSchemaError(f"{where}: options must be a letter->text map or a list of 2-5 options")
    images = []
    for spec in d.get("images", []):
        path, digest = (spec, None) if isinstance(spec, str) else (spec["path"], spec.get("sha256"))
        p = Path(path) if Path(path).is_absolute() else base / path
        try:
            ref = ImageRef.from_path(p)
        except OSError as exc:
            raise QuestionSchemaError(f"{where}: image {path} unreadable: {exc}") from exc
        if digest and digest != ref.sha256:
            raise QuestionSchemaError(f"{where}: image {path} content hash mismatch")
        images.append(ref)
    try:
        return QuestionItem(
            id=str(d["id"]), track=d.get("track"), subtype=d.get("subtype"), stem=d.get("stem", ""),
            options=opts, gold=str(d["gold"]).strip().upper(), images=tuple(images),
            source_dataset=d.get("source_dataset", ""), context=d.get("context"),
        )
    except ValueError as exc:
        if isinstance(exc, QuestionSchemaError):
            raise
        raise QuestionSchemaError(f"{where}: {exc}") from exc


def load_questions(path: str | Path) -> list[QuestionItem]:
    """JSONL with a schema header line, then one item per line."""
    path = Path(path)
    raw = path.read_bytes()
    lines = raw.split(b"\n")
    if not lines or not lines[0].strip():
        raise QuestionSchemaError(f"{path}: missing schema header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise QuestionSchemaError(f"{path}: header is not valid json") from exc
    if header.get("format") != QUESTIONS_FORMAT or "schema_version" not in header:
        raise QuestionSchemaError(f"{path}: missing schema version header")
    if header["schema_version"] != QUESTIONS_SCHEMA_VERSION:
        raise QuestionSchemaError(f"{path}: unsupported schema version {header['schema_version']}")
    items, seen = [], {}
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        start, offset = offset, offset + len(line) + 1
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise QuestionSchemaError(f"{path}: invalid json at byte {start}") from exc
        item = _parse_item(d, path.parent, start)
        if item.id in seen:
            raise QuestionSchemaError(f"{path}: duplicate id {item.id!r} at bytes {seen[item.id]} and {start}")
        seen[item.id] = start
        items.append(item)
    return items


def write_questions(path: str | Path, items: Iterable[QuestionItem]) -> None:
    path = Path(path)
    lines = [json.dumps({"format": QUESTIONS_FORMAT, "schema_version": QUESTIONS_SCHEMA_VERSION})]
    lines += [json.dumps(it.to_dict(path.parent), ensure_ascii=False) for it in items]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- prompts ----------------------------------------------------------------

@dataclass(frozen=True)
class PromptTemplate:
    system: str

    def __post_init__(self):
        if ANSWER_DIRECTIVE not in self.system:
            raise ValidationError(f"prompt template lacks the answer-format directive {ANSWER_DIRECTIVE!r}")

    @classmethod
    def load(cls, path: str | Path | None = None) -> "PromptTemplate":
        if path is None:
            return cls(resources.files("oculus.data").joinpath("system_prompt.txt").read_text(encoding="utf-8"))
        return cls(Path(path).read_text(encoding="utf-8"))


def question_text(item: QuestionItem, knowledge: str | None = None) -> str:
    parts = []
    if knowledge:
        parts.append(f"Reference knowledge:\n{knowledge}")
    if item.context:
        parts.append(f"Case context:\n{item.context}")
    parts.append(f"Question: {item.stem}")
    parts.append("\n".join(f"{k}. {v}" for k, v in item.options.items()))
    return "\n\n".join(parts)


def render_prompt(item: QuestionItem, template: PromptTemplate, knowledge: str | None = None) -> list[ChatMessage]:
    return [system(template.system), user(question_text(item, knowledge), item.images)]


# --- answer extraction ------------------------------------------------------

_CANONICAL = re.compile(r"answer\s*\**\s*[:：]\s*\**\s*\(?\s*([A-E])\b", re.IGNORECASE)
_FALLBACKS = (
    re.compile(r"\(([A-Ea-e])\)"),
    re.compile(r"\b(?:answer|option|choice)\s+(?:is\s+)?(?:option\s+)?\**([A-Ea-e])\b(?![-'])", re.IGNORECASE),
    re.compile(r"^\W*([A-E])\W*$"),
    re.compile(r"^\W*([A-E])[.):]\s"),
    # last standalone capital letter; "A" before a lowercase word reads as the article
    re.compile(r"^.*(?<![\w'-])([B-E]|A(?!\s+[a-z]))(?![\w'-])"),
)


def extract_answer(raw_text: str, valid_letters: Sequence[str], fallback: bool = True) -> str:
    """Letter from ``Answer: X``; else (optionally) a standalone letter on the last line; else ABSTAIN."""
    valid = {v.upper() for v in valid_letters}
    if not valid:
        raise ValidationError("valid_letters must be non-empty")
    for m in _CANONICAL.finditer(raw_text):
        letter = m.group(1).upper()
        if letter in valid:
            return letter
    if fallback:
        lines = [ln for ln in raw_text.splitlines() if ln.strip()]
        if lines:
            last = lines[-1].strip()
            for pat in _FALLBACKS:
                for m in pat.finditer(last):
                    letter = m.group(1).upper()
                    if letter in valid:
                        return letter
    return ABSTAIN


# --- metrics ----------------------------------------------------------------

@dataclass
class MetricReport:
    n: int
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: dict[str, dict[str, float]]
    confusion: dict[str, dict[str, int]]
    n_abstain: int

    def to_dict(self) -> dict:
        return {
            "n": self.n, "accuracy": self.accuracy, "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall, "macro_f1": self.macro_f1,
            "per_class": self.per_class, "confusion": self.confusion, "n_abstain": self.n_abstain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)


def compute_metrics(predictions: Iterable[Prediction], golds: Mapping[str, str]) -> MetricReport:
    predictions = list(predictions)
    pred_ids = [p.item_id for p in predictions]
    if len(set(pred_ids)) != len(pred_ids):
        raise ValidationError("duplicate prediction ids")
    if set(pred_ids) != set(golds):
        missing = sorted(set(golds) ^ set(pred_ids))[:5]
        raise ValidationError(f"prediction/gold id mismatch (e.g. {missing})")
    n = len(predictions)
    confusion: dict[str, dict[str, int]] = {}
    correct = 0
    for p in predictions:
        g = golds[p.item_id]
        row = confusion.setdefault(g, {})
        row[p.extracted] = row.get(p.extracted, 0) + 1
        correct += p.extracted == g
    classes = sorted(confusion)
    predicted_totals: dict[str, int] = {}
    for row in confusion.values():
        for pred, c in row.items():
            predicted_totals[pred] = predicted_totals.get(pred, 0) + c
    per_class = {}
    for c in classes:
        tp = confusion[c].get(c, 0)
        support = sum(confusion[c].values())
        pp = predicted_totals.get(c, 0)
        prec = tp / pp if pp else 0.0
        rec = tp / support if support else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_class[c] = {"precision": prec, "recall": rec, "f1": f1, "support": support}
    k = len(classes)
    return MetricReport(
        n=n,
        accuracy=correct / n if n else 0.0,
        macro_precision=sum(v["precision"] for v in per_class.values()) / k if k else 0.0,
        macro_recall=sum(v["recall"] for v in per_class.values()) / k if k else 0.0,
        macro_f1=sum(v["f1"] for v in per_class.values()) / k if k else 0.0,
        per_class=per_class,
        confusion={g: dict(sorted(row.items())) for g, row in sorted(confusion.items())},
        n_abstain=sum(p.extracted == ABSTAIN for p in predictions),
    )


# --- pipeline ---------------------------------------------------------------

@dataclass
class PipelineConfig:
    stages: frozenset[str] = frozenset()
    parallelism: int = 4
    regex_fallback: bool = True
    static_plan: list[str] | None = None
    retry_limit: int = 3
    rag_k: int = DEFAULT_K

    def __post_init__(self):
        self.stages = frozenset(self.stages)
        unknown = self.stages - set(STAGES)
        if unknown:
            raise ValidationError(f"unknown ablation stages: {sorted(unknown)}")
        if "tools" in self.stages and "decision" not in self.stages and not self.static_plan:
            raise ValidationError("enabling tools without decision requires a static plan")
        if ({"decision", "evaluation"} & self.stages) and "tools" not in self.stages:
            raise ValidationError("decision and evaluation stages require tools")
        if self.parallelism < 1:
            raise ValidationError("parallelism must be >= 1")

    @property
    def allowed_event_stages(self) -> frozenset[str]:
        allowed = {"answer", "score", None}
        if "rag" in self.stages:
            allowed.add("rag")
        if "tools" in self.stages:
            allowed |= {"observe", "tools", "generate"}
            allowed.discard("answer")
        if "decision" in self.stages:
            allowed.add("decision")
        if "evaluation" in self.stages:
            allowed.add("evaluation")
        return frozenset(allowed)


@dataclass
class Pipeline:
    """Everything needed to answer one item under a given ablation."""

    gateway: Gateway
    agents: Mapping[str, Any]
    config: PipelineConfig
    template: PromptTemplate = field(default_factory=PromptTemplate.load)
    index: Index | None = None
    embedder: Embedder | None = None
    registry: ToolRegistry = field(default_factory=ToolRegistry)
    runner: ToolRunner = field(default_factory=ToolRunner)

    def __post_init__(self):
        stages = self.config.stages
        if "rag" in stages and self.index is None:
            raise ValidationError("RAG stage enabled but no index supplied")
        required = {"answerer"} if "tools" not in stages else {"generator"}
        if "rag" in stages:
            required.add("rag_synth")
        if "decision" in stages:
            required.add("planner")
        if "evaluation" in stages:
            required.add("evaluator")
        missing = sorted(required - set(self.agents))
        if missing:
            raise ValidationError(f"pipeline missing backend roles: {', '.join(missing)}")

    def _ask(self, buf, role: str, stage: str, messages: list[ChatMessage]) -> str:
        buf.append_event("prompt", stage, role=role,
                         messages=[{"role": m.role.value, "content": m.content,
                                    "images": [a.sha256 for a in m.attachments]} for m in messages])
        c = self.gateway.complete(self.agents[role], messages)
        buf.append_event("completion", stage, role=role, text=c.text, backend_id=c.backend_id,
                         cached=c.cached, metadata=c.metadata)
        return c.text

    def answer_text(self, item: QuestionItem, buf) -> str:
        stages = self.config.stages
        if "tools" in stages:
            orch = Orchestrator(
                self.gateway, self.agents, self.registry, self.runner,
                index=self.index if "rag" in stages else None, embedder=self.embedder,
                config=OrchestratorConfig(
                    retry_limit=self.config.retry_limit, use_rag="rag" in stages,
                    use_decision="decision" in stages, use_evaluation="evaluation" in stages,
                    static_plan=self.config.static_plan, rag_k=self.config.rag_k,
                    generator_system=self.template.system,
                ),
                trace=buf,
            )
            return orch.run_session(question_text(item), item.images).final.text
        query = f"{item.context}\n{item.stem}" if item.context else item.stem
        knowledge = self.knowledge(query, buf) if "rag" in stages else None
        return self._ask(buf, "answerer", "answer", render_prompt(item, self.template, knowledge))

    def knowledge(self, query: str, buf) -> str:
        def synth(q: str, passages: str) -> str:
            return self._ask(buf, "rag_synth", "rag", [
                system(RETRIEVAL_SYSTEM_PROMPT), user(f"Query:\n{q}\n\nReference passages:\n{passages}")])

        bundle = retrieve(self.index, query, self.config.rag_k, self.embedder, synth)
        buf.append_event("retrieval", "rag", **bundle.to_dict())
        return bundle.synthesized_context

    def answer_free(self, question: str, images: Sequence[ImageRef], buf) -> str:
        """Free-form question without options, for the single-query path without tools."""
        knowledge = self.knowledge(question, buf) if "rag" in self.config.stages else None
        content = f"Reference knowledge:\n{knowledge}\n\n{question}" if knowledge else question
        return self._ask(buf, "answerer", "answer", [system(self.template.system), user(content, images)])

    def predict(self, item: QuestionItem) -> tuple[Prediction, list[dict]]:
        buf = EventBuffer(item_id=item.id)
        t0 = time.perf_counter()
        error = None
        try:
            raw = self.answer_text(item, buf)
        except OculusError as exc:
            raw, error = "", f"{type(exc).__name__}: {exc}"
            buf.append_event("error", "score", message=error)
        latency = int((time.perf_counter() - t0) * 1000)
        extracted = extract_answer(raw, item.letters, self.config.regex_fallback) if raw else ABSTAIN
        pred = Prediction(item.id, raw, extracted, latency, error)
        buf.append_event("prediction", "score", raw_text=raw, extracted=extracted, gold=item.gold,
                         track=item.track.value, subtype=item.subtype, latency_ms=latency, error=error)
        return pred, buf.events


@dataclass
class BenchmarkResult:
    predictions: list[Prediction]
    overall: MetricReport
    by_subtype: dict[str, MetricReport]
    n_errors: int = 0

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "by_subtype": {k: v.to_dict() for k, v in sorted(self.by_subtype.items())},
            "n_errors": self.n_errors,
        }


def score(items: Sequence[QuestionItem], predictions: Sequence[Prediction]) -> BenchmarkResult:
    golds = {it.id: it.gold for it in items}
    by_id = {p.item_id: p for p in predictions}
    groups: dict[str, list[QuestionItem]] = {}
    for it in items:
        groups.setdefault(f"{it.track.value}/{it.subtype}", []).append(it)
    by_subtype = {
        key: compute_metrics([by_id[i.id] for i in its], {i.id: i.gold for i in its})
        for key, its in groups.items()
    }
    return BenchmarkResult(list(predictions), compute_metrics(predictions, golds), by_subtype,
                           sum(p.error is not None for p in predictions))


def run_benchmark(items: Sequence[QuestionItem], pipeline: Pipeline,
                  recorder: RunRecorder | None = None) -> tuple[RunRecord, BenchmarkResult]:
    """Answer every item through the enabled stages, then score.

    Items run concurrently; their event buffers are appended in input order.
    """
    recorder = recorder or RunRecorder("bench run")
    workers = min(pipeline.config.parallelism, max(1, len(items)))
    if workers == 1:
        outs = [pipeline.predict(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(pipeline.predict, items))
    for _, events in outs:
        recorder.extend(events)
    result = score(items, [p for p, _ in outs])
    recorder.append_event("metric", "score", report=result.to_dict())
    return recorder.finalize(), result


def predictions_from_record(record: RunRecord) -> tuple[list[Prediction], dict[str, tuple[str, str, str]]]:
    preds, meta = [], {}
    for e in record.of_type("prediction"):
        preds.append(Prediction(e["item_id"], e["raw_text"], e["extracted"], e.get("latency_ms", 0), e.get("error")))
        meta[e["item_id"]] = (e["gold"], e["track"], e["subtype"])
    return preds, meta


def rescore_record(record: RunRecord) -> dict:
    """Recompute the metric block from the prediction events of a stored run."""
    preds, meta = predictions_from_record(record)
    golds = {i: m[0] for i, m in meta.items()}
    groups: dict[str, list[Prediction]] = {}
    for p in preds:
        _, track, subtype = meta[p.item_id]
        groups.setdefault(f"{track}/{subtype}", []).append(p)
    result = BenchmarkResult(
        preds, compute_metrics(preds, golds),
        {k: compute_metrics(v, {p.item_id: golds[p.item_id] for p in v}) for k, v in groups.items()},
        sum(p.error is not None for p in preds),
    )
    return result.to_dict()


# --- results table ---------------------------------------------------------

_A1_COLS = (
    ("Cat-E", "categorical", ("F1", "Pre", "Rec")),
    ("Pos-E", "positional", ("Acc",)),
    ("Num-E", "numerical", ("Acc",)),
    ("Diag-E", "diagnosis_type", ("F1", "Pre", "Rec")),
    ("Sta-E", "stage_level", ("Acc",)),
)
_A2_COLS = (
    ("Instance", "instance", ("F1", "Pre", "Rec")),
    ("Pathological", "pathological", ("F1", "Pre", "Rec")),
    ("Clinical-Decision", "clinical_decision", ("F1", "Pre", "Rec")),
)
_FIELD = {"F1": "macro_f1", "Pre": "macro_precision", "Rec": "macro_recall", "Acc": "accuracy"}


def _fmt(v: float | None) -> str:
    if v is None:
        return "-"
    return f"{v:.3f}"[1:] if 0 <= v < 1 else f"{v:.3f}"


def _block(title: str, track: str, cols, rows: Sequence[tuple[str, Mapping[str, Any]]]) -> list[str]:
    header1, header2 = ["Model"], [""]
    for name, _, metrics in cols:
        header1 += [name] + [""] * (len(metrics) - 1)
        header2 += list(metrics)
    body = []
    for label, by_subtype in rows:
        cells = [label]
        for _, subtype, metrics in cols:
            rep = by_subtype.get(f"{track}/{subtype}")
            for m in metrics:
                val = None
                if rep is not None:
                    val = rep[_FIELD[m]] if isinstance(rep, Mapping) else getattr(rep, _FIELD[m])
                cells.append(_fmt(val))
        body.append(cells)
    table = [header1, header2] + body
    widths = [max(len(r[i]) for r in table) for i in range(len(header1))]
    out = [f"== {title} =="]
    for r in table:
        out.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
    return out


def format_results_table(rows: Sequence[tuple[str, Mapping[str, Any]]]) -> str:
    """Two-block text table; ``rows`` pairs a label with a ``by_subtype`` mapping."""
    lines = _block("A1 Visual Understanding (instance: Cat-E Pos-E Num-E | pathological: Diag-E Sta-E)",
                   "A1", _A1_COLS, rows)
    lines.append("")
    lines += _block("A2 Logical Composition (instance | pathological | clinical decision)", "A2", _A2_COLS, rows)
    return "\n".join(lines) + "\n"


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
