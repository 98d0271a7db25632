"""Deterministic desk-scale fixtures: tiny images, question files, stub tool
payloads, scripted agent files, a small corpus, and per-ablation configs.

Used by the test-suite and by ``scripts/make_demo.py``.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import yaml
from PIL import Image, ImageDraw

from .gateway import ImageRef
from .harness import A1_SUBTYPES, A2_SUBTYPES, LETTERS, QuestionItem, Track, write_questions
from .tools import ToolId, dr_stage_labels

# fixture payloads with hand-checkable argmax / count
FIXTURE_A_DR = {"no_DR": 0.05, "mild": 0.10, "moderate": 0.70, "severe": 0.10, "proliferative": 0.05}
FIXTURE_B_LESIONS = [
    {"lesion_type": "hemorrhage", "bbox": [10, 12, 20, 22], "confidence": 0.91},
    {"lesion_type": "hard_exudate", "bbox": [30, 5, 38, 11], "confidence": 0.84},
    {"lesion_type": "microaneurysm", "bbox": [44, 40, 47, 43], "confidence": 0.66},
]

_OPTION_POOL = [
    "Diabetic macular edema with hard exudates",
    "Central serous chorioretinopathy",
    "Retinal vein occlusion with hemorrhages",
    "Glaucoma with enlarged cup-to-disc ratio",
    "Age-related macular degeneration with drusen",
    "Proliferative diabetic retinopathy with neovascularization",
    "Epiretinal membrane over the fovea",
    "Macular hole in the fovea",
    "Retinal detachment",
    "Pathologic myopia with lacquer cracks",
    "Cotton wool spots from hypertensive retinopathy",
    "Optic disc edema",
    "Retinitis pigmentosa",
    "Cataract obscuring the fundus view",
    "Normal fundus",
]


def write_png(path: str | Path, modality: str, seed: int = 0, size: int = 48, sidecar: bool = False) -> ImageRef:
    """Small synthetic CFP (orange disc on dark field) or OCT (grey bands)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    if modality.upper() == "CFP":
        img = Image.new("RGB", (size, size), (10, 5, 5))
        d = ImageDraw.Draw(img)
        d.ellipse((2, 2, size - 3, size - 3), fill=(200, 90 + rng.randrange(40), 40))
        cx, cy = rng.randrange(size // 3, 2 * size // 3), rng.randrange(size // 3, 2 * size // 3)
        d.ellipse((cx - 5, cy - 5, cx + 5, cy + 5), fill=(250, 220, 150))
    else:
        img = Image.new("L", (size, size), 20)
        d = ImageDraw.Draw(img)
        for i in range(3):
            y = size // 4 + i * size // 6 + rng.randrange(3)
            d.rectangle((0, y, size, y + 3), fill=120 + 40 * i)
    img.save(path, format="PNG")
    if sidecar:
        path.with_name(path.name + ".json").write_text(json.dumps({"modality": modality.upper()}))
    return ImageRef.from_path(path)


def escape_reply(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def write_script(path: str | Path, rules: Iterable[tuple[str, str]], default: str | Sequence[str] = "I cannot tell.") -> Path:
    """Write a scripted-backend file; ``default`` becomes the trailing ``*`` rule(s)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for pattern, reply in rules:
        if "\t" in pattern or "\n" in pattern:
            raise ValueError(f"pattern may not contain tabs or newlines: {pattern!r}")
        lines.append(f"{pattern}\t{escape_reply(reply)}")
    for reply in [default] if isinstance(default, str) else default:
        lines.append(f"*\t{escape_reply(reply)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def content_rules(items: Sequence[QuestionItem], answer_of=None, prefix: str = "") -> list[tuple[str, str]]:
    """One regex rule per (item, letter): identifies the item by its stem and
    the option letter by the gold text, so the reply follows the content even
    after the options are shuffled. ``answer_of(item) -> option text`` picks the
    text to answer with (default: the gold option)."""
    rules = []
    for it in items:
        target = answer_of(it) if answer_of else it.options[it.gold]
        stem = re.escape(f"Question: {it.stem}")
        for letter in it.letters:
            pat = f"re:(?m){stem}.*^{letter}\\. {re.escape(target)}$"
            rules.append((pat, f"{prefix}The findings fit option {letter}.\nAnswer: {letter}"))
    return rules


def make_items(n: int, image_dir: str | Path, seed: int = 0, n_options: int | None = None) -> list[QuestionItem]:
    rng = random.Random(seed)
    image_dir = Path(image_dir)
    kinds = [(Track.A1, s) for s in A1_SUBTYPES] + [(Track.A2, s) for s in A2_SUBTYPES]
    items = []
    for i in range(n):
        track, subtype = kinds[i % len(kinds)]
        k = n_options or rng.randint(3, 5)
        texts = rng.sample(_OPTION_POOL, k)
        options = {LETTERS[j]: t for j, t in enumerate(texts)}
        modality = "OCT" if i % 4 == 3 else "CFP"
        img = write_png(image_dir / f"case{i:03d}_{modality.lower()}.png", modality, seed * 1000 + i)
        ctx = f"Patient {i}, {40 + i % 40} years, blurred vision for {1 + i % 6} months." if i % 2 else None
        items.append(QuestionItem(
            id=f"q{i:03d}", track=track, subtype=subtype,
            stem=f"Case {i:03d}: which finding best explains this {modality} image?",
            options=options, gold=rng.choice(list(options)), images=(img,),
            source_dataset="synthetic", context=ctx,
        ))
    return items


# --- canned agent replies ------------------------------------------------------

def plan_reply(steps: Sequence[tuple[str, int]]) -> str:
    tools = [{"tool": t, "image": i, "rationale": f"{t} provides evidence for the query"} for t, i in steps]
    return "```json\n" + json.dumps({"tools": tools}) + "\n```"


def verdict_reply(correct: bool = True, complete: bool = True, feedback: str = "evidence is sufficient") -> str:
    return "```json\n" + json.dumps({"is_correct": correct, "is_complete": complete, "feedback": feedback}) + "\n```"


def grading_reply(scores: dict[str, Sequence[int]], rewards: dict[str, int] | None = None) -> str:
    body = {"scores": {k: list(v) for k, v in scores.items()}}
    if rewards is not None:
        body["rewards"] = rewards
    return "```json\n" + json.dumps(body) + "\n```"


CORPUS = {
    "dr_grading.txt": (
        "Diabetic retinopathy is graded on the international five-stage scale: no apparent retinopathy, "
        "mild non-proliferative retinopathy with microaneurysms only, moderate non-proliferative retinopathy, "
        "severe non-proliferative retinopathy following the 4-2-1 rule, and proliferative retinopathy with "
        "neovascularization or vitreous hemorrhage. Diabetic macular edema may occur at any stage and is "
        "identified by retinal thickening or hard exudates near the fovea. "
    ) * 3,
    "glaucoma.html": (
        "<html><head><title>Glaucoma</title><style>p{}</style></head><body><h1>Glaucoma</h1>"
        "<p>Glaucomatous optic neuropathy is assessed by the vertical cup-to-disc ratio. A ratio above 0.6, "
        "asymmetry between eyes, or notching of the neuroretinal rim raises suspicion. Intraocular pressure "
        "is a modifiable risk factor managed with drops, laser or trabeculectomy.</p>"
        "<script>var x = 1;</script></body></html>"
    ),
    "oct_findings.md": (
        "# OCT findings\n\nOptical coherence tomography shows the retinal layers in cross-section. A full "
        "thickness macular hole is a defect at the fovea; central serous chorioretinopathy shows subretinal "
        "fluid; choroidal neovascularization appears as a hyperreflective lesion beneath the retinal pigment "
        "epithelium. Epiretinal membrane appears as a hyperreflective line on the inner retinal surface.\n"
    ),
}


def write_corpus(root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name, text in CORPUS.items():
        (root / name).write_text(text, encoding="utf-8")
    src = root / "sources.txt"
    src.write_text("# local reference documents\n" + "\n".join(CORPUS) + "\n", encoding="utf-8")
    return src


def write_stub_fixtures(stub_dir: str | Path, cfp: ImageRef, oct_: ImageRef | None = None) -> Path:
    """Fixture A (DR stages) and fixture B (three lesion boxes) bound to ``cfp``."""
    stub_dir = Path(stub_dir)
    stub_dir.mkdir(parents=True, exist_ok=True)
    assert tuple(FIXTURE_A_DR) == dr_stage_labels()
    (stub_dir / f"{ToolId.DR_SEVERITY.value}.json").write_text(json.dumps({cfp.sha256: {"stages": FIXTURE_A_DR}}))
    (stub_dir / f"{ToolId.LESION_DETECT.value}.json").write_text(
        json.dumps({cfp.sha256: {"lesions": FIXTURE_B_LESIONS}}))
    return stub_dir


# --- whole fixture trees ------------------------------------------------------

ABLATION_ROWS = {
    "rag": {"ablation": ["rag"]},
    "tools": {"ablation": ["tools"], "static_plan": ["diagnose"]},
    "rag_tools_decision": {"ablation": ["rag", "tools", "decision"]},
    "full": {"ablation": ["rag", "tools", "decision", "evaluation"]},
}


@dataclass
class Fixture:
    root: Path
    items: list[QuestionItem]
    questions: Path
    sources: Path
    stub_dir: Path
    scripts: dict[str, Path]
    configs: dict[str, Path] = field(default_factory=dict)


def agent_scripts(root: str | Path, items: Sequence[QuestionItem]) -> dict[str, Path]:
    root = Path(root)
    answer_rules = content_rules(items)
    return {
        "answerer": write_script(root / "answerer.tsv", answer_rules, "I am not certain."),
        "generator": write_script(root / "generator.tsv", answer_rules,
                                  "Tool outputs were inconclusive; no option can be chosen."),
        "rag_synth": write_script(root / "rag_synth.tsv", [],
                                  "Relevant guidance: grade retinopathy by lesion type and extent."),
        "planner": write_script(root / "planner.tsv", [
            ("ROLE: tool-selector", "diagnose"),
            ("ROLE: decision-agent", plan_reply([("diagnose", 0)])),
        ], "NO_TOOLS: nothing to do"),
        "evaluator": write_script(root / "evaluator.tsv", [], verdict_reply()),
        "sim_generator": write_script(root / "sim_generator.tsv", [],
                                      grading_reply({k: [1, 0, 1, 0, 0] for k in LETTERS})),
        "sim_evaluator": write_script(root / "sim_evaluator.tsv", [],
                                      grading_reply({k: [1, 0, 1, 0, 0] for k in LETTERS})),
    }


def config_dict(fx: "Fixture", row: dict, parallelism: int = 4) -> dict:
    backends = {role: {"id": role, "kind": "scripted", "script": str(path)}
                for role, path in fx.scripts.items()}
    cfg = {
        "backends": backends,
        "retry_limit": 3,
        "rag": {"sources": str(fx.sources), "k": 3},
        "tools": {"stub_dir": str(fx.stub_dir)},
        "harness": {"parallelism": parallelism},
        "robustness": {"generator_role": "sim_generator", "evaluator_role": "sim_evaluator"},
        "runs_dir": str(fx.root / "runs"),
    }
    cfg.update(row)
    return cfg


def make_fixture(root: str | Path, n_items: int = 10, seed: int = 0, parallelism: int = 4) -> Fixture:
    root = Path(root)
    items = make_items(n_items, root / "images", seed)
    questions = root / "questions.jsonl"
    write_questions(questions, items)
    sources = write_corpus(root / "corpus")
    cfp = next(i for it in items for i in it.images if "_cfp" in i.path)
    stub_dir = write_stub_fixtures(root / "stubs", cfp)
    fx = Fixture(root, items, questions, sources, stub_dir, agent_scripts(root / "scripts", items))
    cfg_dir = root / "configs"
    cfg_dir.mkdir(parents=True, exist_ok=True)
    for name, row in {"baseline": {}, **ABLATION_ROWS}.items():
        path = cfg_dir / f"{name}.yaml"
        path.write_text(yaml.safe_dump(config_dict(fx, row, parallelism), sort_keys=False), encoding="utf-8")
        fx.configs[name] = path
    return fx
