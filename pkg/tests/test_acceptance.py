"""Acceptance suite: one PASS/FAIL line per criterion (see the terminal summary).

Every check compares against an oracle written here, independent of the code
under test: brute-force counting for metrics, exact rational cosine for
retrieval, a verdict-stream model for the agent loop, content lookup for the
robustness policy.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import socket
import time
from collections import Counter
from fractions import Fraction

import pytest

from helpers import FlakyStub, criterion, events, images, invoked, orchestrator
from oculus.cli import main, replay_record
from oculus.config import build_runtime, load_config
from oculus.gateway import BackendProfile, Gateway
from oculus.harness import (
    ABSTAIN,
    Pipeline,
    PipelineConfig,
    Prediction,
    QuestionItem,
    compute_metrics,
    extract_answer,
    format_results_table,
    run_benchmark,
)
from oculus.orchestrator import adherence
from oculus.retrieval import HashingEmbedder, SourceDocument, chunk_and_embed, retrieve
from oculus.robustness import GOLD_REWARD, MAX_TURNS, load_lexicon, run_robustness
from oculus.synthetic import ABLATION_ROWS, grading_reply, plan_reply, verdict_reply
from oculus.tools import ToolId
from oculus.trace import RunRecorder, load_run

FALLBACK_BYTES = b"No tools available to use, directly output the current response:\n"
TOOLS = [t.value for t in ToolId]


@pytest.fixture
def no_network(monkeypatch):
    def refuse(*a, **k):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)


# --- 1. loop conformance ---------------------------------------------------------

def _incomplete(feedback):
    return verdict_reply(True, False, feedback)


EV = "ROLE: evaluation-agent"
DA = "ROLE: decision-agent"


def _scenarios():
    """(name, orchestrator kwargs, image kinds, check(result, orch) -> bool)."""
    fb = lambda r: r.final.text.encode("utf-8").startswith(FALLBACK_BYTES)  # noqa: E731
    return [
        ("happy path", {}, ["CFP"],
         lambda r, o: not fb(r) and r.iterations == 1 and invoked(o) == ["diagnose"] and r.final.text == "final answer"),
        ("not followed -> replan", {"stub": FlakyStub({"diagnose": 1})}, ["CFP"],
         lambda r, o: not r.verdicts[0].is_followed and len(events(o, "plan")) == 2 and not fb(r)),
        ("missing tool appended and retried",
         {"evaluator_rules": [(EV, _incomplete("run lesion detection")), (EV, verdict_reply())]}, ["CFP"],
         lambda r, o: invoked(o) == ["diagnose", "lesion_detect"] and r.iterations == 2 and not fb(r)
         and len(events(o, "plan")) == 1),
        ("incorrect with tool feedback appended",
         {"evaluator_rules": [(EV, verdict_reply(False, True, "check the dr_severity grade")), (EV, verdict_reply())]},
         ["CFP"], lambda r, o: invoked(o) == ["diagnose", "dr_severity"] and not fb(r)),
        ("empty missing set -> fallback", {"evaluator_default": _incomplete("something is off")}, ["CFP"],
         lambda r, o: fb(r) and r.iterations == 1 and not r.retry_limit_hit),
        ("missing tool already planned -> fallback", {"evaluator_default": _incomplete("run diagnose again")}, ["CFP"],
         lambda r, o: fb(r) and invoked(o) == ["diagnose"]),
        ("missing tool without compatible image -> fallback",
         {"evaluator_default": _incomplete("need oct_localize")}, ["CFP"],
         lambda r, o: fb(r) and "oct_localize" not in invoked(o)),
        ("retry limit via repeated amends", {"retry_limit": 2, "evaluator_rules": [
            (EV, _incomplete("run lesion detection")), (EV, _incomplete("run fundus_localize"))]}, ["CFP"],
         lambda r, o: fb(r) and r.retry_limit_hit and r.iterations == 2
         and invoked(o) == ["diagnose", "lesion_detect", "fundus_localize"] and len(r.verdicts) == 2),
        ("retry limit via persistent tool failure", {"retry_limit": 3, "stub": FlakyStub({"diagnose": 99})}, ["CFP"],
         lambda r, o: fb(r) and r.retry_limit_hit and len(events(o, "plan")) == 3
         and len(events(o, "tool_error")) == 3),
        ("no images -> direct generation", {}, [],
         lambda r, o: not fb(r) and invoked(o) == [] and r.iterations == 1),
        ("planner re-ask", {"planner_rules": [(DA, "no json here"), (DA, plan_reply([("diagnose", 0)]))]}, ["CFP"],
         lambda r, o: len(events(o, "reask")) == 1 and not fb(r)),
        ("evaluator parse failure -> fallback", {"evaluator_default": "not a verdict"}, ["CFP"],
         lambda r, o: fb(r)),
        ("static plan, decision and evaluation off",
         {"use_decision": False, "use_evaluation": False, "static_plan": ["diagnose", "dr_severity"]}, ["CFP"],
         lambda r, o: invoked(o) == ["diagnose", "dr_severity"] and not events(o, "verdict") and not fb(r)),
    ]


def test_criterion_1_loop_conformance(tmp_path, no_network):
    t0 = time.perf_counter()
    failed = []
    scenarios = _scenarios()
    for i, (name, kw, kinds, check) in enumerate(scenarios):
        root = tmp_path / f"s{i}"
        root.mkdir()
        orch = orchestrator(root, **kw)
        res = orch.run_session("Which disease is present?", images(root, kinds))
        if res.final.fallback != res.final.text.encode().startswith(FALLBACK_BYTES) or not check(res, orch):
            failed.append(name)
    elapsed = time.perf_counter() - t0
    ok = not failed and len(scenarios) >= 10 and elapsed < 5.0
    assert criterion(1, ok, f"{len(scenarios) - len(failed)}/{len(scenarios)} scenarios, {elapsed:.2f}s"
                            + (f", failed: {failed}" if failed else ""))


# --- 2. termination and retry bounds --------------------------------------------

def _random_verdict(rng):
    named = rng.sample(TOOLS, rng.randint(0, 3))
    text = " and ".join(f"please run {t}" for t in named) if named else rng.choice(["", "looks partial"])
    correct, complete = rng.random() < 0.6, rng.random() < 0.5
    return correct, complete, text, named


def _mentioned_order(text):
    hits = [(text.find(t), t) for t in TOOLS if t in text]
    return [t for _, t in sorted(hits)]


def test_criterion_2_termination_bounds(tmp_path, no_network):
    cases, problems = 1000, []
    for case in range(cases):
        rng = random.Random(case)
        limit = rng.randint(1, 8)
        stream = [_random_verdict(rng) for _ in range(limit + 1)]
        replies = [verdict_reply(c, k, t) for c, k, t, _ in stream]
        failures = rng.choice([0, 0, 0, 1, 2])
        root = tmp_path / f"c{case}"
        root.mkdir()
        orch = orchestrator(root, retry_limit=limit, evaluator_rules=[(EV, r) for r in replies],
                            stub=FlakyStub({"diagnose": failures}))
        res = orch.run_session("q", images(root, ["CFP", "OCT"]))
        evs = orch.trace.events
        if res.iterations > limit or len(res.verdicts) > limit:
            problems.append((case, "iterations"))

        # replay the verdict stream through a model of the loop to get the expected appends
        planned = []
        expected = []
        for j, v in enumerate(res.verdicts):
            if j == 0 or not res.verdicts[j - 1].is_followed:
                planned = ["diagnose"]
            if not v.is_followed or (v.is_correct and v.is_complete):
                continue
            _, _, text, _ = stream[min(j, len(stream) - 1)]
            add = [t for t in _mentioned_order(text) if t not in planned]
            expected.append(add)
            planned = planned + add
        amends = [e["added"] for e in evs if e["type"] == "amend"]
        if [a for a in expected if a] != amends:
            problems.append((case, "amend", expected, amends))

        # each appended tool runs exactly once before the next re-plan
        for idx, e in enumerate(evs):
            if e["type"] != "amend":
                continue
            seg = []
            for later in evs[idx + 1:]:
                if later["type"] == "plan":
                    break
                if later["type"] in ("tool_invocation", "tool_error"):
                    seg.append(later["tool"])
            counts = Counter(seg)
            if any(counts[t] != 1 for t in e["added"]):
                problems.append((case, "once", e["added"], seg))

        turns = [m.get("turn", 0) for m in res.state.memory.events]
        sizes = [sum(1 for t in turns if t <= i) for i in range(0, res.iterations + 1)]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            problems.append((case, "memory", sizes))
    assert criterion(2, not problems, f"{cases} verdict streams, retry_limit 1-8, {len(problems)} violations"
                                      + (f", first: {problems[0]}" if problems else ""))


# --- 3. mechanical adherence -------------------------------------------------------

def _same(a, b):
    if len(a) != len(b):
        return False
    return all(x is y for x, y in zip(a, b))


def test_criterion_3_adherence(tmp_path, no_network):
    rng = random.Random(3)
    alphabet = list(ToolId)
    pairs, wrong, n_equal = 10_000, 0, 0
    for _ in range(pairs):
        a = [rng.choice(alphabet) for _ in range(rng.randint(0, 6))]
        r = rng.random()
        if r < 0.4:
            b = list(a)
        elif r < 0.7 and a:
            b = list(a)
            op = rng.randrange(3)
            if op == 0:
                b.pop(rng.randrange(len(b)))
            elif op == 1:
                b.insert(rng.randrange(len(b) + 1), rng.choice(alphabet))
            else:
                rng.shuffle(b)
        else:
            b = [rng.choice(alphabet) for _ in range(rng.randint(0, 6))]
        n_equal += _same(a, b)
        wrong += adherence(a, b) != _same(a, b)

    # an evaluator that lies about adherence must not move the flag
    lies = 0
    for i in range(40):
        root = tmp_path / f"l{i}"
        root.mkdir()
        fail = i % 2 == 1
        claim = json.dumps({"is_correct": True, "is_complete": True, "feedback": "all fine",
                            "is_followed": fail, "workflow_followed": "yes" if fail else "no"})
        orch = orchestrator(root, retry_limit=1, evaluator_default=claim,
                            stub=FlakyStub({"diagnose": 1 if fail else 0}))
        res = orch.run_session("q", images(root))
        lies += res.verdicts[0].is_followed != (not fail)
    ok = wrong == 0 and lies == 0 and 0 < n_equal < pairs
    assert criterion(3, ok, f"{pairs} pairs ({n_equal} identical), {wrong} mismatches; "
                            f"40 lying evaluators, {lies} flags moved")


# --- 4. metric oracle ---------------------------------------------------------------

def _oracle_metrics(pairs):
    gold_classes = sorted({g for g, _ in pairs})
    n = len(pairs)
    acc = Fraction(sum(g == p for g, p in pairs), n)
    ps, rs, fs = [], [], []
    for c in gold_classes:
        tp = sum(1 for g, p in pairs if g == c and p == c)
        fp = sum(1 for g, p in pairs if g != c and p == c)
        fn = sum(1 for g, p in pairs if g == c and p != c)
        prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        rec = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
        ps.append(prec)
        rs.append(rec)
        fs.append(f1)
    k = len(gold_classes)
    return float(acc), float(sum(ps) / k), float(sum(rs) / k), float(sum(fs) / k)


def test_criterion_4_metric_oracle():
    rng = random.Random(4)
    sets, worst = 200, 0.0
    for _ in range(sets):
        classes = "ABCDEF"[: rng.randint(2, 6)]
        n = rng.randint(1, 60)
        pairs = []
        for _ in range(n):
            g = rng.choice(classes)
            p = g if rng.random() < 0.4 else rng.choice(list(classes) + [ABSTAIN])
            pairs.append((g, p))
        rep = compute_metrics([Prediction(str(i), "", p) for i, (_, p) in enumerate(pairs)],
                              {str(i): g for i, (g, _) in enumerate(pairs)})
        want = _oracle_metrics(pairs)
        got = (rep.accuracy, rep.macro_precision, rep.macro_recall, rep.macro_f1)
        worst = max(worst, *(abs(a - b) for a, b in zip(got, want)))
    assert criterion(4, worst <= 1e-9, f"{sets} prediction sets, max abs error {worst:.2e} (tol 1e-9)")


# --- 5. answer extraction -------------------------------------------------------------

EXTRACTION_CORPUS = [
    ("Answer: C", "C"),
    ("answer: d", "D"),
    ("After weighing the findings, the lesion pattern fits best.\nAnswer: B", "B"),
    ("Answer: E\nThe exudates confirm it.", "E"),
    ("**Answer:** A", "A"),
    ("Answer: (B)", "B"),
    ("The correct option is (C).", "C"),
    ("The answer is (d).", "D"),
    ("I choose option B because of the cup-to-disc ratio.", "B"),
    ("Final answer - A", "A"),
    ("answer:c", "C"),
    ("(E) Retinal detachment", "E"),
    ("Option D is the most consistent with the image.", "D"),
    ("I'd pick B", "B"),
    ("I cannot answer this question without more information.", ABSTAIN),
    ("I'm sorry, but I can't provide a diagnosis.", ABSTAIN),
    ("As an AI I am unable to interpret medical images.", ABSTAIN),
    ("", ABSTAIN),
    ("Answer: F", ABSTAIN),
    ("None of the options seem appropriate.", ABSTAIN),
]


def test_criterion_5_answer_extraction():
    letters = list("ABCDE")
    got = [extract_answer(raw, letters) for raw, _ in EXTRACTION_CORPUS]
    agree = sum(g == want for g, (_, want) in zip(got, EXTRACTION_CORPUS))
    misses = [(raw, g, want) for g, (raw, want) in zip(got, EXTRACTION_CORPUS) if g != want]
    # refusals must score as incorrect
    preds = [Prediction(str(i), raw, g) for i, ((raw, _), g) in enumerate(zip(EXTRACTION_CORPUS, got))]
    rep = compute_metrics(preds, {str(i): "A" for i in range(len(preds))})
    n_refusal = sum(want == ABSTAIN for _, want in EXTRACTION_CORPUS)
    refusals_wrong = rep.n_abstain == n_refusal and rep.confusion["A"].get(ABSTAIN, 0) == n_refusal
    ok = agree == len(EXTRACTION_CORPUS) == 20 and refusals_wrong
    assert criterion(5, ok, f"{agree}/{len(EXTRACTION_CORPUS)} labels agree, {n_refusal} refusals scored incorrect"
                            + (f", misses: {misses}" if misses else ""))


# --- 6. retrieval exactness --------------------------------------------------------------

_WORD = re.compile(r"\w+", re.UNICODE)


def _bucket_counts(text, dim):
    counts = Counter()
    for tok in _WORD.findall(text.lower()):
        h = hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest()
        counts[int.from_bytes(h, "little") % dim] += 1
    return counts


def _exact_cos2(q, c):
    """Squared cosine as an exact fraction (counts are non-negative, so order is preserved)."""
    dot = sum(v * c.get(b, 0) for b, v in q.items())
    nq = sum(v * v for v in q.values())
    nc = sum(v * v for v in c.values())
    if not nq or not nc:
        return Fraction(0)
    return Fraction(dot * dot, nq * nc)


def test_criterion_6_retrieval_exactness():
    rng = random.Random(6)
    vocab = [f"w{i}" for i in range(60)] + ["retina", "macula", "glaucoma", "drusen", "exudate", "cup", "disc"]
    texts = [" ".join(rng.choice(vocab) for _ in range(rng.randint(3, 12))) for _ in range(90)]
    texts += rng.sample(texts, 10)  # exact duplicates force score ties
    docs = [SourceDocument(f"doc{i:03d}", t, "") for i, t in enumerate(texts)]
    emb = HashingEmbedder(256)
    index = chunk_and_embed(docs, 1000, 200, emb)
    counts = [_bucket_counts(c.text, 256) for c in index.chunks]

    queries = [" ".join(rng.choice(vocab) for _ in range(rng.randint(1, 4))) for _ in range(50)]
    mismatches = 0
    for q in queries:
        qc = _bucket_counts(q, 256)
        order = sorted(range(len(index.chunks)),
                       key=lambda i: (-_exact_cos2(qc, counts[i]), index.chunks[i].doc_ref, index.chunks[i].ordinal))
        want = [(index.chunks[i].doc_ref, index.chunks[i].ordinal) for i in order[:5]]
        hits = retrieve(index, q, k=5, embedder=emb).hits
        got = [(h.chunk.doc_ref, h.chunk.ordinal) for h in hits]
        score_ok = all(abs(h.score - float(_exact_cos2(qc, counts[i])) ** 0.5) <= 1e-9
                       for h, i in zip(hits, order[:5]))
        mismatches += got != want or not score_ok

    self_bad = 0
    for c in index.chunks:
        top = retrieve(index, c.text, k=1, embedder=emb).hits[0]
        dup_first = min(d.doc_ref for d in index.chunks if d.text == c.text)
        self_bad += not (abs(top.score - 1.0) <= 1e-9 and top.chunk.doc_ref == dup_first)
    ok = len(index) == 100 and mismatches == 0 and self_bad == 0
    assert criterion(6, ok, f"{len(index)} chunks, {len(queries)} queries, {mismatches} ranking mismatches; "
                            f"self-similarity failures {self_bad}/{len(index)}")


# --- 7. robustness semantics ---------------------------------------------------------------

_OPT = re.compile(r"^([A-E])\. (.*)$", re.M)
_STEM = re.compile(r"^Question: (.*)$", re.M)
_GOLD = re.compile(r"^Correct answer: ([A-E])\. ", re.M)


class _Policy:
    """In-process backend; ``respond(prompt_text) -> reply``."""

    def __init__(self, name, respond):
        self.profile = BackendProfile(name, "remote_chat", model_name="policy", endpoint="https://policy.invalid")
        self.respond = respond

    def generate(self, messages):
        return self.respond(messages[-1].content if len(messages) == 2 else "\n".join(m.content for m in messages)), {}, {}


def _content_answerer(gold_text):
    def respond(prompt):
        stem = _STEM.search(prompt).group(1)
        for letter, text in _OPT.findall(prompt):
            if text == gold_text[stem]:
                return f"The option matching the findings is {text}.\nAnswer: {letter}"
        return "I cannot tell."
    return respond


def _grader(rng, calls, agree_p, malformed_p):
    def respond(prompt):
        block = prompt.split("\n\nProposed grading")[0]
        calls[_STEM.search(block).group(1)] += 1
        if rng.random() < malformed_p:
            return "let me think about it"
        letters = [k for k, _ in _OPT.findall(block)]
        gold = _GOLD.search(block).group(1)
        scores = {k: [1] * 5 if k == gold else [int(rng.random() < 0.3) for _ in range(5)] for k in letters}
        if "Proposed grading" in prompt and rng.random() < agree_p:
            proposed, _ = json.JSONDecoder().raw_decode(prompt.split("Proposed grading:\n", 1)[1])
            scores = proposed["scores"]
        # occasionally understate gold to exercise the override
        rewards = {gold: 3} if rng.random() < 0.1 else None
        return grading_reply(scores, rewards)
    return respond


def _random_items(rng, n, lexicon, tag):
    phrases = sorted(lexicon) + [s for v in lexicon.values() for s in v]
    items = []
    for i in range(n):
        k = rng.randint(2, 5)
        texts = set()
        while len(texts) < k:
            base = rng.choice(phrases)
            texts.add(base.capitalize() if rng.random() < 0.5 else f"{base.capitalize()} in the {rng.choice(['left', 'right'])} eye")
        opts = dict(zip("ABCDE", sorted(texts)))
        items.append(QuestionItem(f"{tag}{i:04d}", "A1" if i % 2 else "A2",
                                  "categorical" if i % 2 else "instance", f"{tag} case {i}: which finding?",
                                  opts, rng.choice(list(opts))))
    return items


def _robust_batch(rng, items, seed, lexicon, calls):
    gold_text = {it.stem: it.options[it.gold] for it in items}
    gw = Gateway()
    pipe = Pipeline(gw, {"answerer": _Policy("answerer", _content_answerer(gold_text))}, PipelineConfig())
    gen = _Policy("sim_generator", _grader(rng, calls, 0.5, 0.1))
    ev = _Policy("sim_evaluator", _grader(rng, calls, 0.6, 0.1))
    return run_robustness(items, pipe, gen, ev, seed, lexicon)


def test_criterion_7_robustness_semantics():
    lexicon = load_lexicon()
    rng = random.Random(7)
    problems = []
    n_pairs = n_subs = 0
    calls = Counter()

    def check(res, items):
        nonlocal n_pairs, n_subs
        for it, p in zip(items, res.perturbed):
            n_pairs += 1
            n_subs += len(p.substitutions)
            letters = sorted(it.options)
            if sorted(p.permutation) != letters or sorted(p.permutation.values()) != letters:
                problems.append((it.id, "not a bijection"))
            if p.item.gold != p.permutation[it.gold] or p.item.options[p.item.gold] != it.options[it.gold]:
                problems.append((it.id, "gold remap"))
        rep = res.report
        if rep.consistency != 1.0 or rep.acc_delta_pp != 0.0 or rep.acc_before != 1.0:
            problems.append(("report", rep.to_dict()))
        for vecs in (res.rewards_before, res.rewards_after):
            for iid, v in vecs.items():
                if v.turns_used > MAX_TURNS:
                    problems.append((iid, "turn cap", v.turns_used))
        for phase, vecs, graded in (("before", res.rewards_before, items),
                                    ("after", res.rewards_after, [p.item for p in res.perturbed])):
            for it in graded:
                if vecs[it.id].rewards[it.gold] != GOLD_REWARD:
                    problems.append((it.id, phase, "gold reward"))
        n = len(items)
        if max(rep.total_reward_before, rep.total_reward_after) > 4 * n:
            problems.append(("total reward", n))
        return rep

    # 500 (item, seed) pairs: 50 seeds over fresh 10-item batches
    for s in range(50):
        items = _random_items(rng, 10, lexicon, f"s{s}-")
        check(_robust_batch(rng, items, rng.randrange(10**6), lexicon, calls), items)
    batch_pairs = n_pairs
    # a 1250-item run for the 4n bound
    big = _random_items(rng, 1250, lexicon, "big-")
    rep = check(_robust_batch(rng, big, 1250, lexicon, calls), big)
    # two phases, two backends: each stem is graded at most 2 * 2 * MAX_TURNS times
    over_cap = [k for k, v in calls.items() if v > 4 * MAX_TURNS]
    problems += [(k, "backend calls over cap") for k in over_cap]
    ok = not problems and batch_pairs >= 500 and n_subs > 0
    assert criterion(7, ok, f"{batch_pairs} random (item, seed) pairs + 1250-item run, {n_subs} lexicon swaps, consistency 1.0, delta 0.0pp; "
                            f"n=1250 total reward {rep.total_reward_before}/{4 * 1250}; "
                            f"{len(problems)} violations" + (f", first: {problems[0]}" if problems else ""))


# --- 8. ablation isolation ---------------------------------------------------------------

STAGE_EVENTS = {"rag": {"rag"}, "tools": {"observe", "tools", "generate"}, "decision": {"decision"},
                "evaluation": {"evaluation"}}
TOOL_TYPES = {"observation", "selection", "plan", "tool_invocation", "tool_error", "verdict", "amend"}


def test_criterion_8_ablation_isolation(fixture_tree, no_network):
    problems, rows = [], []
    for name in ABLATION_ROWS:
        cfg = load_config(fixture_tree.configs[name])
        stages = cfg.ablation
        allowed = {"score", None} | ({"answer"} if "tools" not in stages else set())
        for s in stages:
            allowed |= STAGE_EVENTS[s]
        rec = RunRecorder("bench run", cfg.snapshot(), {})
        record, result = run_benchmark(fixture_tree.items, build_runtime(cfg).pipeline(), rec)
        seen = {e.get("stage") for e in record.events}
        types = Counter(e["type"] for e in record.events)
        if not seen <= allowed:
            problems.append((name, "stages", sorted(map(str, seen - allowed))))
        if "rag" not in stages and types["retrieval"]:
            problems.append((name, "retrieval events with rag off"))
        if "rag" in stages and types["retrieval"] < len(fixture_tree.items):
            problems.append((name, "rag enabled but not used"))
        if "tools" not in stages and any(types[t] for t in TOOL_TYPES):
            problems.append((name, "tool events with tools off"))
        if "tools" in stages and not types["tool_invocation"]:
            problems.append((name, "tools enabled but not used"))
        if "decision" not in stages and types["plan"] and any(
                e.get("stage") == "decision" for e in record.events):
            problems.append((name, "decision events"))
        if "evaluation" not in stages and types["verdict"]:
            problems.append((name, "verdicts with evaluation off"))
        if record.final("metric") is None or result.overall.n != 10:
            problems.append((name, "no report"))
        rows.append((name, result.by_subtype))
    table = format_results_table(rows).splitlines()
    blocks = [i for i, ln in enumerate(table) if ln.startswith("== ")]
    layout_ok = (len(blocks) == 2 and table[blocks[0]].startswith("== A1") and table[blocks[1]].startswith("== A2")
                 and all(sum(ln.split()[:1] == [n] for ln in table) == 2 for n in ABLATION_ROWS))
    if not layout_ok:
        problems.append(("layout", table[:4]))
    assert criterion(8, not problems, f"{len(ABLATION_ROWS)} ablation rows x 10 items, two-block table "
                                      f"{'ok' if layout_ok else 'malformed'}, {len(problems)} violations"
                                      + (f", first: {problems[0]}" if problems else ""))


# --- 9. replay determinism -----------------------------------------------------------------

def test_criterion_9_replay(fixture_tree, tmp_path, no_network, capsys):
    runs = tmp_path / "runs"
    made = []
    for name in ("full", "rag_tools_decision", "baseline"):
        for it in fixture_tree.items[:3]:
            argv = ["query", "--question", it.stem, "--config", str(fixture_tree.configs[name]), "--runs-dir", str(runs)]
            if name != "baseline":
                argv += ["--image", it.images[0].path]
            assert main(argv) == 0
    for name in fixture_tree.configs:
        assert main(["bench", "run", "--questions", str(fixture_tree.questions), "--config",
                     str(fixture_tree.configs[name]), "--out", str(tmp_path / f"out-{name}"),
                     "--runs-dir", str(runs)]) == 0
    assert main(["robust", "run", "--questions", str(fixture_tree.questions), "--seed", "11", "--config",
                 str(fixture_tree.configs["baseline"]), "--out", str(tmp_path / "rob"), "--runs-dir", str(runs)]) == 0
    capsys.readouterr()
    made = sorted(runs.glob("*.jsonl"))
    bad = []
    for path in made:
        record = load_run(path)
        ok, detail, new = replay_record(record, tmp_path / "replays")
        if record.command == "bench run":
            raw = lambda r: [(e["item_id"], e["raw_text"]) for e in r.of_type("prediction")]  # noqa: E731
            ok = ok and raw(record) == raw(new)
        if not ok:
            bad.append((record.command, path.name, detail))
    ok = len(made) == 9 + len(fixture_tree.configs) + 1 and not bad
    assert criterion(9, ok, f"{len(made)} stored runs replayed (query, bench run, robust run), "
                            f"{len(bad)} differ" + (f": {bad}" if bad else ""))


# --- 10. live smoke --------------------------------------------------------------------------

@pytest.mark.skipif(not (os.environ.get("OCULUS_API_KEY") and os.environ.get("OCULUS_API_BASE")),
                    reason="live smoke needs OCULUS_API_KEY and OCULUS_API_BASE")
def test_criterion_10_live_smoke(tmp_path):
    import yaml

    from oculus.harness import write_questions
    from oculus.synthetic import make_items

    items = make_items(20, tmp_path / "img", seed=10)
    write_questions(tmp_path / "q.jsonl", items)
    model = os.environ.get("OCULUS_MODEL", "gpt-4o-mini")
    (tmp_path / "live.yaml").write_text(yaml.safe_dump({
        "backends": {"answerer": {"kind": "remote_chat", "model_name": model}},
        "runs_dir": str(tmp_path / "runs"),
    }))
    code = main(["bench", "run", "--questions", str(tmp_path / "q.jsonl"), "--config", str(tmp_path / "live.yaml"),
                 "--out", str(tmp_path / "out")])
    report = json.loads((tmp_path / "out" / "report.json").read_text()) if code == 0 else {}
    ok = code == 0 and report.get("overall", {}).get("n") == 20 and "by_subtype" in report
    assert criterion(10, ok, f"live bench run against {model}: exit {code}, "
                             f"accuracy {report.get('overall', {}).get('accuracy')}")


def test_criterion_10_reported_when_skipped():
    if os.environ.get("OCULUS_API_KEY") and os.environ.get("OCULUS_API_BASE"):
        pytest.skip("live smoke runs instead")
    from helpers import ACCEPTANCE_LINES

    ACCEPTANCE_LINES.append("CRITERION 10 SKIP: no OCULUS_API_KEY/OCULUS_API_BASE; live smoke not run")
