"""Option-shuffle / synonym perturbation, dialogue-based option rewards, and
consistency reporting."""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ValidationError
from .gateway import ChatMessage, Gateway, Role, system, user
from .harness import ABSTAIN, Pipeline, Prediction, QuestionItem
from .orchestrator import extract_json_block
from .trace import EventBuffer

logger = logging.getLogger(__name__)

DIMENSIONS = ("etiology", "anatomical_location", "vascular_involvement", "course_or_stage", "lesion_morphology")
MAX_TURNS = 5
GOLD_REWARD = 4

GENERATOR_SYSTEM_PROMPT = (
    "ROLE: similarity-generator. You are an ophthalmology examiner grading how close each option of a "
    "multiple-choice question is to the correct answer. For every option, mark each of five clinical "
    "dimensions 1 if the option shares it with the correct answer and 0 otherwise: etiology, "
    "anatomical_location, vascular_involvement, course_or_stage, lesion_morphology. Then give a reward "
    "from 0 to 4: the correct answer receives 4, other options receive less in proportion to decreasing "
    "similarity, and options unrelated to the correct answer receive 0.\n"
    "Reply with a fenced json block:\n"
    '```json\n{"scores": {"A": [0, 1, 0, 0, 1], ...}, "rewards": {"A": 2, ...}}\n```'
)

EVALUATOR_SYSTEM_PROMPT = (
    "ROLE: similarity-evaluator. You independently check a proposed similarity grading of multiple-choice "
    "options against the correct answer along the same five clinical dimensions (etiology, "
    "anatomical_location, vascular_involvement, course_or_stage, lesion_morphology) and the same 0-4 "
    "reward scale. Reply with your own grading in the same fenced json format; repeat the proposal "
    "exactly if you agree with it."
)

FORMAT_REMINDER = 'Reply again with only the fenced json block {"scores": {...}, "rewards": {...}}.'


# --- lexicon and perturbation -----------------------------------------------

def load_lexicon(path: str | Path | None = None) -> dict[str, list[str]]:
    if path is None:
        text = resources.files("oculus.data").joinpath("synonyms.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    lex: dict[str, list[str]] = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        phrase, syn = line.split("\t", 1)
        lex.setdefault(phrase.strip().lower(), []).append(syn.strip())
    return lex


@dataclass(frozen=True)
class Substitution:
    letter: str
    original: str
    synonym: str


@dataclass(frozen=True)
class PerturbedItem:
    base: QuestionItem
    permutation: Mapping[str, str]
    substitutions: tuple[Substitution, ...]
    seed: int
    item: QuestionItem

    @property
    def inverse(self) -> dict[str, str]:
        return {new: old for old, new in self.permutation.items()}

    @property
    def gold(self) -> str:
        return self.item.gold


def substitute(text: str, lexicon: Mapping[str, Sequence[str]], rng: random.Random) -> tuple[str, str, str] | None:
    """Replace the longest lexicon phrase found in ``text`` (leftmost on ties)."""
    best = None
    low = text.lower()
    for phrase in lexicon:
        for m in re.finditer(r"(?<!\w)" + re.escape(phrase) + r"(?!\w)", low):
            key = (-(m.end() - m.start()), m.start())
            if best is None or key < best[0]:
                best = (key, m.start(), m.end(), phrase)
            break
    if best is None:
        return None
    _, s, e, phrase = best
    synonym = rng.choice(sorted(lexicon[phrase]))
    return text[:s] + synonym + text[e:], text[s:e], synonym


def perturb(item: QuestionItem, seed: int, lexicon: Mapping[str, Sequence[str]] | None = None) -> PerturbedItem:
    """Shuffle option positions and swap at most one lexicon phrase per distractor."""
    if len(item.options) < 2:
        raise ValidationError("perturbation needs at least two options")
    lexicon = load_lexicon() if lexicon is None else lexicon
    rng = random.Random(f"{seed}:{item.id}")
    letters = item.letters
    order = letters[:]
    rng.shuffle(order)
    # order[i] is the old letter that lands at position i
    permutation = {old: letters[i] for i, old in enumerate(order)}
    subs = []
    texts = {}
    taken = {v.lower() for v in item.options.values()}
    for old in letters:
        text = item.options[old]
        if old != item.gold:
            hit = substitute(text, lexicon, rng)
            if hit is None:
                logger.debug("lexicon miss for %s option %s", item.id, old)
            elif hit[0].lower() in taken:
                # reciprocal synonym pairs could turn a distractor into another option
                logger.debug("substitution for %s option %s would duplicate an option; kept", item.id, old)
            else:
                text, original, synonym = hit
                subs.append(Substitution(permutation[old], original, synonym))
                taken.add(text.lower())
        texts[permutation[old]] = text
    new_options = {k: texts[k] for k in letters}
    new_item = QuestionItem(item.id, item.track, item.subtype, item.stem, new_options,
                            permutation[item.gold], item.images, item.source_dataset, item.context)
    return PerturbedItem(item, permutation, tuple(subs), seed, new_item)


# --- rewards ----------------------------------------------------------------

def reward_from_dimensions(dims: Sequence[int]) -> int:
    return round(GOLD_REWARD * sum(dims) / len(DIMENSIONS))


@dataclass
class Grading:
    dims: dict[str, tuple[int, ...]]
    rewards: dict[str, int]

    def to_dict(self) -> dict:
        return {"scores": {k: list(v) for k, v in self.dims.items()}, "rewards": dict(self.rewards)}


def parse_grading(text: str, letters: Sequence[str]) -> Grading:
    block = extract_json_block(text)
    if not isinstance(block, dict) or not isinstance(block.get("scores"), dict):
        raise ValueError("missing 'scores' object")
    dims = {}
    for letter in letters:
        raw = block["scores"].get(letter)
        if isinstance(raw, dict):
            raw = [raw.get(d) for d in DIMENSIONS]
        if not isinstance(raw, list) or len(raw) != len(DIMENSIONS) or any(v not in (0, 1) for v in raw):
            raise ValueError(f"option {letter}: expected five 0/1 dimension scores")
        dims[letter] = tuple(int(v) for v in raw)
    rewards_raw = block.get("rewards")
    rewards = {}
    for letter in letters:
        if isinstance(rewards_raw, dict) and letter in rewards_raw:
            r = rewards_raw[letter]
            if isinstance(r, bool) or not isinstance(r, int) or not 0 <= r <= GOLD_REWARD:
                raise ValueError(f"option {letter}: reward must be an integer in [0, 4]")
            rewards[letter] = r
        else:
            rewards[letter] = reward_from_dimensions(dims[letter])
    return Grading(dims, rewards)


@dataclass
class RewardVector:
    item_id: str
    rewards: dict[str, int]
    dimension_scores: dict[str, tuple[int, ...]]
    converged: bool
    turns_used: int
    needs_human: bool
    gold_overridden: bool = False
    generator_last: dict | None = None
    evaluator_last: dict | None = None

    def monotone(self) -> bool:
        """More matched dimensions never carries a strictly lower reward."""
        keys = list(self.rewards)
        for a in keys:
            for b in keys:
                if sum(self.dimension_scores[a]) > sum(self.dimension_scores[b]) and self.rewards[a] < self.rewards[b]:
                    return False
        return True

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id, "rewards": self.rewards,
            "dimension_scores": {k: list(v) for k, v in self.dimension_scores.items()},
            "converged": self.converged, "turns_used": self.turns_used, "needs_human": self.needs_human,
            "gold_overridden": self.gold_overridden,
        }


def _item_block(item: QuestionItem) -> str:
    opts = "\n".join(f"{k}. {v}" for k, v in item.options.items())
    ctx = f"Case context:\n{item.context}\n\n" if item.context else ""
    return f"{ctx}Question: {item.stem}\n{opts}\n\nCorrect answer: {item.gold}. {item.options[item.gold]}"


def score_options(
    item: QuestionItem,
    gateway: Gateway,
    generator,
    evaluator,
    max_turns: int = MAX_TURNS,
    trace=None,
) -> RewardVector:
    """Alternate generator proposals and evaluator checks until the two reward
    vectors agree or ``max_turns`` turns pass. Format re-asks spend turns."""
    trace = trace if trace is not None else EventBuffer(item_id=item.id)
    letters = item.letters

    def ask(role: str, handle, messages: list[ChatMessage]) -> str:
        trace.append_event("prompt", "robustness", role=role,
                           messages=[{"role": m.role.value, "content": m.content} for m in messages])
        c = gateway.complete(handle, messages)
        trace.append_event("completion", "robustness", role=role, text=c.text, backend_id=c.backend_id)
        return c.text

    gen_msgs = [system(GENERATOR_SYSTEM_PROMPT), user(_item_block(item))]
    last_gen: Grading | None = None
    last_eval: Grading | None = None
    eval_reminder = False
    converged = False
    turns = 0
    for turn in range(1, max_turns + 1):
        turns = turn
        g_reply = ask("generator", generator, gen_msgs)
        try:
            grading = parse_grading(g_reply, letters)
        except (ValueError, KeyError) as exc:
            trace.append_event("dialogue", "robustness", turn=turn, event="generator_format_error", problem=str(exc))
            gen_msgs = gen_msgs + [ChatMessage(Role.ASSISTANT, g_reply), user(FORMAT_REMINDER)]
            continue
        last_gen = grading
        proposal = json.dumps(grading.to_dict(), sort_keys=True)
        e_msgs = [system(EVALUATOR_SYSTEM_PROMPT), user(f"{_item_block(item)}\n\nProposed grading:\n{proposal}")]
        if eval_reminder:
            e_msgs.append(user(FORMAT_REMINDER))
        e_reply = ask("evaluator", evaluator, e_msgs)
        try:
            e_grading = parse_grading(e_reply, letters)
            eval_reminder = False
        except (ValueError, KeyError) as exc:
            trace.append_event("dialogue", "robustness", turn=turn, event="evaluator_format_error", problem=str(exc))
            eval_reminder = True
            gen_msgs = gen_msgs + [ChatMessage(Role.ASSISTANT, g_reply),
                                   user("The evaluator could not reply in format. Restate or revise your grading.")]
            continue
        last_eval = e_grading
        trace.append_event("dialogue", "robustness", turn=turn, event="exchange",
                           generator=grading.rewards, evaluator=e_grading.rewards)
        if grading.rewards == e_grading.rewards:
            converged = True
            break
        gen_msgs = gen_msgs + [
            ChatMessage(Role.ASSISTANT, g_reply),
            user(f"The evaluator graded differently:\n{json.dumps(e_grading.to_dict(), sort_keys=True)}\n"
                 "Revise or defend your grading and reply in the same format."),
        ]

    chosen = last_gen or last_eval
    if chosen is None:
        dims = {k: (0,) * len(DIMENSIONS) for k in letters}
        rewards = {k: 0 for k in letters}
    else:
        dims, rewards = dict(chosen.dims), dict(chosen.rewards)
    overridden = rewards[item.gold] != GOLD_REWARD or dims[item.gold] != (1,) * len(DIMENSIONS)
    rewards[item.gold] = GOLD_REWARD
    dims[item.gold] = (1,) * len(DIMENSIONS)
    vec = RewardVector(
        item.id, rewards, dims, converged, turns, not converged, overridden,
        last_gen.to_dict() if last_gen else None, last_eval.to_dict() if last_eval else None,
    )
    trace.append_event("reward", "robustness", **vec.to_dict())
    return vec


# --- reports ----------------------------------------------------------------

@dataclass
class ConsistencyReport:
    n_items: int
    acc_before: float
    acc_after: float
    consistency: float
    acc_delta_pp: float
    acc_delta_relative_pct: float | None
    consistency_drop_pp: float
    consistency_drop_relative_pct: float | None
    total_reward_before: int = 0
    total_reward_after: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def compute_consistency(before: Mapping[str, bool], after: Mapping[str, bool]) -> ConsistencyReport:
    """``before``/``after`` map item id to whether that run answered correctly."""
    if set(before) != set(after):
        raise ValidationError("runs cover different item sets")
    n = len(before)
    if n == 0:
        raise ValidationError("no items")
    acc_b = sum(before.values()) / n
    acc_a = sum(after.values()) / n
    both = sum(before[i] and after[i] for i in before) / n
    return ConsistencyReport(
        n_items=n, acc_before=acc_b, acc_after=acc_a, consistency=both,
        acc_delta_pp=(acc_a - acc_b) * 100,
        acc_delta_relative_pct=(acc_a - acc_b) / acc_b * 100 if acc_b else None,
        consistency_drop_pp=(acc_b - both) * 100,
        consistency_drop_relative_pct=(acc_b - both) / acc_b * 100 if acc_b else None,
    )


def total_reward(choices: Mapping[str, str], reward_vectors: Mapping[str, RewardVector]) -> int:
    """Sum of the reward of each chosen option; ABSTAIN earns 0."""
    total = 0
    for item_id, letter in choices.items():
        if letter == ABSTAIN:
            continue
        vec = reward_vectors.get(item_id)
        if vec is None:
            raise ValidationError(f"no reward vector for answered item {item_id}")
        total += vec.rewards[letter]
    return total


def grades(predictions: Sequence[Prediction], items: Sequence[QuestionItem]) -> dict[str, bool]:
    golds = {it.id: it.gold for it in items}
    return {p.item_id: p.extracted == golds[p.item_id] for p in predictions}


@dataclass
class RobustnessResult:
    report: ConsistencyReport
    perturbed: list[PerturbedItem]
    before: list[Prediction]
    after: list[Prediction]
    rewards_before: dict[str, RewardVector]
    rewards_after: dict[str, RewardVector]
    adjudication: list[dict] = field(default_factory=list)


def run_robustness(
    items: Sequence[QuestionItem],
    pipeline: Pipeline,
    generator,
    evaluator,
    seed: int,
    lexicon: Mapping[str, Sequence[str]] | None = None,
    recorder=None,
    max_turns: int = MAX_TURNS,
) -> RobustnessResult:
    lexicon = load_lexicon() if lexicon is None else lexicon
    perturbed = [perturb(it, seed, lexicon) for it in items]
    before, after = [], []
    rewards_before, rewards_after, queue = {}, {}, []
    for it, pit in zip(items, perturbed):
        for phase, target, preds, rewards in (("before", it, before, rewards_before),
                                              ("after", pit.item, after, rewards_after)):
            pred, events = pipeline.predict(target)
            buf = EventBuffer(item_id=it.id, phase=phase)
            vec = score_options(target, pipeline.gateway, generator, evaluator, max_turns, buf)
            if recorder is not None:
                for e in events:
                    e["phase"] = phase
                recorder.extend(events)
                recorder.extend(buf.events)
            preds.append(pred)
            rewards[it.id] = vec
            if vec.needs_human:
                queue.append({"item_id": it.id, "phase": phase, "options": target.options, "gold": target.gold,
                              "generator_last": vec.generator_last, "evaluator_last": vec.evaluator_last})
        if recorder is not None:
            recorder.append_event("note", "robustness", item_id=it.id, permutation=dict(pit.permutation),
                                  substitutions=[s.__dict__ for s in pit.substitutions])
    report = compute_consistency(grades(before, items), grades(after, [p.item for p in perturbed]))
    report.total_reward_before = total_reward({p.item_id: p.extracted for p in before}, rewards_before)
    report.total_reward_after = total_reward({p.item_id: p.extracted for p in after}, rewards_after)
    if recorder is not None:
        recorder.append_event("metric", "robustness", report=report.to_dict(), adjudication=len(queue))
    return RobustnessResult(report, perturbed, before, after, rewards_before, rewards_after, queue)
