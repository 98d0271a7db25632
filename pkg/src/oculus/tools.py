"""Ophthalmic tool registry, typed outputs, modality classification, and adapters.

Vision models are out of scope, so every tool runs behind an adapter: ``stub``
replays fixture payloads keyed by image hash (or synthesizes a deterministic
one from the hash), ``remote`` POSTs the image to an endpoint and validates the
returned JSON against the variant schema.
"""

from __future__ import annotations

import base64
import json
import math
import random
import re
import time
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import (
    ImageDecodeError,
    ModalityMismatch,
    ToolError,
    ToolSchemaError,
    ToolTimeout,
    TransportError,
    ValidationError,
)
from .gateway import ImageRef, Transport, httpx_transport


class ToolId(str, Enum):
    DIAGNOSE = "diagnose"
    LESION_DETECT = "lesion_detect"
    FUNDUS_LOCALIZE = "fundus_localize"
    OCT_LOCALIZE = "oct_localize"
    DR_SEVERITY = "dr_severity"


class Modality(str, Enum):
    CFP = "CFP"
    OCT = "OCT"
    UNKNOWN = "unknown"


LESION_TYPES = ("hard_exudate", "soft_exudate", "hemorrhage", "microaneurysm")


def _read_labels(name: str) -> tuple[str, ...]:
    text = resources.files("oculus.data").joinpath(name).read_text(encoding="utf-8")
    return tuple(line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#"))


@lru_cache(maxsize=None)
def condition_labels() -> tuple[str, ...]:
    return _read_labels("conditions.txt")


@lru_cache(maxsize=None)
def dr_stage_labels() -> tuple[str, ...]:
    return _read_labels("dr_stages.txt")


# --- geometry ---------------------------------------------------------------

Polygon = list[tuple[float, float]]


def _vertical_extent(poly: Sequence[Sequence[float]]) -> float:
    ys = [float(p[1]) for p in poly]
    return max(ys) - min(ys)


def compute_cdr(cup: Sequence[Sequence[float]], disc: Sequence[Sequence[float]]) -> float:
    """Vertical cup-to-disc ratio. Values above 1 are returned with a warning."""
    if len(cup) < 3 or len(disc) < 3:
        raise ValidationError("cup and disc polygons need at least 3 vertices")
    disc_h = _vertical_extent(disc)
    if disc_h <= 0:
        raise ValidationError("disc vertical extent is 0")
    cup_h = _vertical_extent(cup)
    if cup_h <= 0:
        raise ValidationError("cup vertical extent is 0")
    cdr = cup_h / disc_h
    if cdr > 1:
        warnings.warn(f"cup vertical extent exceeds disc extent (CDR={cdr:.3f})", RuntimeWarning, stacklevel=2)
    return cdr


# --- output variants --------------------------------------------------------

@dataclass(frozen=True)
class DiagnosisScores:
    scores: Mapping[str, float]

    def to_payload(self) -> dict:
        return {"scores": dict(self.scores)}


@dataclass(frozen=True)
class LesionBox:
    lesion_type: str
    bbox: tuple[float, float, float, float]
    confidence: float


@dataclass(frozen=True)
class LesionBoxes:
    lesions: tuple[LesionBox, ...]

    def to_payload(self) -> dict:
        return {"lesions": [{"lesion_type": b.lesion_type, "bbox": list(b.bbox), "confidence": b.confidence}
                            for b in self.lesions]}


@dataclass(frozen=True)
class FundusRegions:
    cup: tuple[tuple[float, float], ...]
    disc: tuple[tuple[float, float], ...]
    cdr: float

    def to_payload(self) -> dict:
        return {"cup": [list(p) for p in self.cup], "disc": [list(p) for p in self.disc], "cdr": self.cdr}


@dataclass(frozen=True)
class OctRegions:
    choroid: tuple[tuple[float, float], ...]
    retina: tuple[tuple[float, float], ...]
    macular_hole: tuple[tuple[float, float], ...] | None

    def to_payload(self) -> dict:
        return {
            "choroid": [list(p) for p in self.choroid],
            "retina": [list(p) for p in self.retina],
            "macular_hole": None if self.macular_hole is None else [list(p) for p in self.macular_hole],
        }


@dataclass(frozen=True)
class DrStageScores:
    stages: Mapping[str, float]

    def to_payload(self) -> dict:
        return {"stages": dict(self.stages)}

    @property
    def argmax(self) -> str:
        return max(self.stages, key=self.stages.get)


ToolOutput = DiagnosisScores | LesionBoxes | FundusRegions | OctRegions | DrStageScores

OUTPUT_TYPES: dict[ToolId, type] = {
    ToolId.DIAGNOSE: DiagnosisScores,
    ToolId.LESION_DETECT: LesionBoxes,
    ToolId.FUNDUS_LOCALIZE: FundusRegions,
    ToolId.OCT_LOCALIZE: OctRegions,
    ToolId.DR_SEVERITY: DrStageScores,
}


def _fail(tool_id, invariant, payload):
    raise ToolSchemaError(str(getattr(tool_id, "value", tool_id)), invariant, payload)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _check_prob(tool_id, x, payload):
    if not _is_num(x):
        _fail(tool_id, "probability must be a finite number", payload)
    if not 0.0 <= x <= 1.0:
        _fail(tool_id, "probability out of [0,1]", payload)


def _check_polygon(tool_id, name, poly, payload):
    if not isinstance(poly, (list, tuple)) or len(poly) < 3:
        _fail(tool_id, f"{name}: polygon needs at least 3 vertices", payload)
    for p in poly:
        if not isinstance(p, (list, tuple)) or len(p) != 2 or not all(_is_num(v) for v in p):
            _fail(tool_id, f"{name}: vertices must be finite (x, y) pairs", payload)


def _check_label_map(tool_id, m, labels, what, payload):
    if not isinstance(m, Mapping):
        _fail(tool_id, f"expected a mapping of {what}", payload)
    if len(m) != len(labels):
        _fail(tool_id, f"expected {len(labels)} {what}", payload)
    unknown = sorted(set(m) - set(labels))
    if unknown:
        _fail(tool_id, f"unknown {what}: {', '.join(unknown)}", payload)
    for v in m.values():
        _check_prob(tool_id, v, payload)


def validate_output(tool_id: ToolId | str, payload: Any) -> None:
    """Raise ToolSchemaError naming the first violated invariant; return None if valid."""
    try:
        tool_id = ToolId(tool_id)
    except ValueError:
        _fail(tool_id, f"unknown tool id {tool_id!r}", payload)
    if not isinstance(payload, Mapping):
        _fail(tool_id, "payload must be an object", payload)

    if tool_id is ToolId.DIAGNOSE:
        _check_label_map(tool_id, payload.get("scores"), condition_labels(), "condition labels", payload)
    elif tool_id is ToolId.DR_SEVERITY:
        _check_label_map(tool_id, payload.get("stages"), dr_stage_labels(), "DR stage labels", payload)
    elif tool_id is ToolId.LESION_DETECT:
        lesions = payload.get("lesions")
        if not isinstance(lesions, list):
            _fail(tool_id, "lesions must be a list", payload)
        for les in lesions:
            if not isinstance(les, Mapping):
                _fail(tool_id, "lesion entries must be objects", payload)
            if les.get("lesion_type") not in LESION_TYPES:
                _fail(tool_id, f"lesion_type must be one of {', '.join(LESION_TYPES)}", payload)
            bbox = les.get("bbox")
            if not isinstance(bbox, (list, tuple)) or len(bbox) != 4 or not all(_is_num(v) for v in bbox):
                _fail(tool_id, "bbox must be four finite numbers", payload)
            x1, y1, x2, y2 = bbox
            if not (x1 < x2 and y1 < y2):
                _fail(tool_id, "bbox requires x1<x2 and y1<y2", payload)
            _check_prob(tool_id, les.get("confidence"), payload)
    elif tool_id is ToolId.FUNDUS_LOCALIZE:
        _check_polygon(tool_id, "cup", payload.get("cup"), payload)
        _check_polygon(tool_id, "disc", payload.get("disc"), payload)
        cdr = payload.get("cdr")
        if not _is_num(cdr) or not 0 < cdr <= 1:
            _fail(tool_id, "cdr must be a finite number in (0,1]", payload)
    elif tool_id is ToolId.OCT_LOCALIZE:
        _check_polygon(tool_id, "choroid", payload.get("choroid"), payload)
        _check_polygon(tool_id, "retina", payload.get("retina"), payload)
        if payload.get("macular_hole") is not None:
            _check_polygon(tool_id, "macular_hole", payload["macular_hole"], payload)


def _poly(p) -> tuple[tuple[float, float], ...]:
    return tuple((float(x), float(y)) for x, y in p)


def parse_output(tool_id: ToolId | str, payload: Mapping) -> ToolOutput:
    tool_id = ToolId(tool_id)
    if tool_id is ToolId.FUNDUS_LOCALIZE and "cdr" not in payload and "cup" in payload and "disc" in payload:
        payload = {**payload, "cdr": compute_cdr(payload["cup"], payload["disc"])}
    validate_output(tool_id, payload)
    if tool_id is ToolId.DIAGNOSE:
        return DiagnosisScores(MappingProxyType({k: float(v) for k, v in payload["scores"].items()}))
    if tool_id is ToolId.DR_SEVERITY:
        labels = dr_stage_labels()
        return DrStageScores(MappingProxyType({k: float(payload["stages"][k]) for k in labels}))
    if tool_id is ToolId.LESION_DETECT:
        return LesionBoxes(tuple(
            LesionBox(les["lesion_type"], tuple(float(v) for v in les["bbox"]), float(les["confidence"]))
            for les in payload["lesions"]
        ))
    if tool_id is ToolId.FUNDUS_LOCALIZE:
        return FundusRegions(_poly(payload["cup"]), _poly(payload["disc"]), float(payload["cdr"]))
    mh = payload.get("macular_hole")
    return OctRegions(_poly(payload["choroid"]), _poly(payload["retina"]), None if mh is None else _poly(mh))


# --- registry ---------------------------------------------------------------

class Adapter(str, Enum):
    REMOTE = "remote"
    STUB = "stub"


@dataclass(frozen=True)
class ToolDescriptor:
    tool_id: ToolId
    accepted_modalities: frozenset[Modality]
    description: str
    adapter: Adapter = Adapter.STUB
    endpoint: str | None = None
    aliases: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tool_id", ToolId(self.tool_id))
        object.__setattr__(self, "adapter", Adapter(self.adapter))
        object.__setattr__(self, "accepted_modalities", frozenset(Modality(m) for m in self.accepted_modalities))
        if not self.accepted_modalities:
            raise ValidationError(f"tool {self.tool_id.value} must accept at least one modality")
        if self.adapter is Adapter.REMOTE and not self.endpoint:
            raise ValidationError(f"remote tool {self.tool_id.value} requires an endpoint")

    def accepts(self, modality: Modality | str) -> bool:
        return Modality(modality) in self.accepted_modalities


_DEFAULTS = {
    ToolId.DIAGNOSE: (
        {Modality.CFP, Modality.OCT},
        "Classifies 18 ophthalmic conditions from a CFP or OCT image; outputs a probability in [0,1] per condition.",
        ("diagnose tool", "diagnosis tool", "diagnose", "diagnosis"),
    ),
    ToolId.LESION_DETECT: (
        {Modality.CFP},
        "Detects hard exudates, soft exudates, hemorrhages and microaneurysms in CFP images; outputs boxes with confidences.",
        ("lesion detection tool", "lesion detection", "lesion detector", "lesion detect", "detect lesions"),
    ),
    ToolId.FUNDUS_LOCALIZE: (
        {Modality.CFP},
        "Segments optic cup and disc in CFP images and reports the vertical cup-to-disc ratio.",
        ("fundus localization tool", "fundus localization", "fundus localize", "cup-to-disc ratio",
         "cup to disc ratio", "optic disc segmentation", "cdr"),
    ),
    ToolId.OCT_LOCALIZE: (
        {Modality.OCT},
        "Segments choroid, retina and macular hole in OCT scans; outputs region coordinates.",
        ("oct localization tool", "oct localization", "oct localize", "oct segmentation",
         "octsegmentationtool", "oct segmentation tool"),
    ),
    ToolId.DR_SEVERITY: (
        {Modality.CFP},
        "Grades diabetic retinopathy on the five-stage ICDR scale from a CFP image; outputs a probability per stage.",
        ("dr severity diagnose tool", "dr severity tool", "dr severity", "dr grading", "dr_classifiertool",
         "dr classifier", "diabetic retinopathy grading", "diabetic retinopathy severity"),
    ),
}


def default_descriptors() -> list[ToolDescriptor]:
    return [ToolDescriptor(t, mods, desc, aliases=aliases) for t, (mods, desc, aliases) in _DEFAULTS.items()]


class ToolRegistry:
    """Immutable tool set T."""

    def __init__(self, descriptors: Iterable[ToolDescriptor] | None = None):
        descs = list(default_descriptors() if descriptors is None else descriptors)
        table: dict[ToolId, ToolDescriptor] = {}
        for d in descs:
            if d.tool_id in table:
                raise ValidationError(f"duplicate tool id {d.tool_id.value}")
            table[d.tool_id] = d
        self._table = MappingProxyType(table)

    def __iter__(self):
        return iter(self._table.values())

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, tool_id) -> bool:
        try:
            return ToolId(tool_id) in self._table
        except ValueError:
            return False

    def get(self, tool_id: ToolId | str) -> ToolDescriptor:
        try:
            return self._table[ToolId(tool_id)]
        except (ValueError, KeyError):
            raise ValidationError(f"unknown tool {tool_id!r}") from None

    @property
    def ids(self) -> list[ToolId]:
        return list(self._table)

    def compatible(self, modalities: Iterable[Modality]) -> list[ToolId]:
        mods = set(modalities)
        return [d.tool_id for d in self if d.accepted_modalities & mods]

    def mentions(self, text: str) -> list[ToolId]:
        """Tool ids mentioned in free text, in order of first mention."""
        terms: list[tuple[str, ToolId]] = []
        for d in self:
            for term in {d.tool_id.value, d.tool_id.value.replace("_", " "), *d.aliases}:
                terms.append((term.lower(), d.tool_id))
        terms.sort(key=lambda t: -len(t[0]))
        low = text.lower()
        taken: list[tuple[int, int, ToolId]] = []
        for term, tid in terms:
            for m in re.finditer(r"(?<![a-z0-9_])" + re.escape(term) + r"(?![a-z0-9_])", low):
                s, e = m.span()
                if not any(s < te and ts < e for ts, te, _ in taken):
                    taken.append((s, e, tid))
        seen: list[ToolId] = []
        for _, _, tid in sorted(taken):
            if tid not in seen:
                seen.append(tid)
        return seen


# --- modality ---------------------------------------------------------------

@dataclass(frozen=True)
class ModalityLabel:
    label: Modality
    confidence: float


def decode_check(image: ImageRef) -> None:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(image.path) as im:
            im.verify()
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode image {image.path}: {exc}") from exc


_MODALITY_TOKEN = re.compile(r"(?:^|[_\-.])(cfp|oct)(?=$|[_\-.])", re.IGNORECASE)


def classify_modality(
    image: ImageRef,
    classifier: Callable[[ImageRef], Mapping[str, float]] | None = None,
    threshold: float = 0.5,
) -> ModalityLabel:
    """CFP/OCT/unknown.

    Without a classifier the sidecar ``<image>.json`` ``modality`` tag is used,
    then a ``_cfp``/``_oct`` filename token. A classifier returns class scores;
    below ``threshold`` the label is unknown with the best rejected score.
    """
    decode_check(image)
    if classifier is not None:
        scores = {Modality(k): float(v) for k, v in classifier(image).items() if k in ("CFP", "OCT")}
        if not scores:
            return ModalityLabel(Modality.UNKNOWN, 0.0)
        best = max(scores, key=scores.get)
        if scores[best] >= threshold:
            return ModalityLabel(best, scores[best])
        return ModalityLabel(Modality.UNKNOWN, scores[best])

    sidecar = Path(image.path + ".json")
    if sidecar.exists():
        tag = json.loads(sidecar.read_text(encoding="utf-8")).get("modality")
        if tag is not None and str(tag).upper() in ("CFP", "OCT"):
            return ModalityLabel(Modality(str(tag).upper()), 1.0)
    m = _MODALITY_TOKEN.search(Path(image.path).stem)
    if m:
        return ModalityLabel(Modality(m.group(1).upper()), 1.0)
    return ModalityLabel(Modality.UNKNOWN, 0.0)


def remote_modality_classifier(endpoint: str, transport: Transport | None = None) -> Callable[[ImageRef], dict]:
    transport = transport or httpx_transport

    def classify(image: ImageRef) -> dict:
        b64 = base64.b64encode(image.read_bytes()).decode("ascii")
        status, body = transport(endpoint, {"image": b64}, {}, 30.0)
        if status != 200:
            raise ToolError(f"modality classifier returned HTTP {status}")
        return body.get("scores", {})

    return classify


# --- invocation -------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


@dataclass
class ToolInvocation:
    tool_id: ToolId
    image: ImageRef
    started_at: str
    finished_at: str
    output: ToolOutput | None
    error: str | None
    adapter_used: Adapter

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "tool_id": self.tool_id.value,
            "image": {"path": self.image.path, "sha256": self.image.sha256},
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "output": None if self.output is None else self.output.to_payload(),
            "error": self.error,
            "adapter": self.adapter_used.value,
        }


def synthesize_payload(tool_id: ToolId, image_hash: str) -> dict:
    """Deterministic pseudo-output derived from the image hash."""
    rng = random.Random(f"{tool_id.value}:{image_hash}")
    if tool_id is ToolId.DIAGNOSE:
        return {"scores": {lab: round(rng.random(), 4) for lab in condition_labels()}}
    if tool_id is ToolId.DR_SEVERITY:
        raw = [rng.random() + 1e-3 for _ in dr_stage_labels()]
        total = sum(raw)
        return {"stages": {lab: r / total for lab, r in zip(dr_stage_labels(), raw)}}
    if tool_id is ToolId.LESION_DETECT:
        lesions = []
        for _ in range(rng.randint(0, 4)):
            x, y = rng.uniform(0, 400), rng.uniform(0, 400)
            w, h = rng.uniform(4, 60), rng.uniform(4, 60)
            lesions.append({"lesion_type": rng.choice(LESION_TYPES), "bbox": [x, y, x + w, y + h],
                            "confidence": round(rng.random(), 4)})
        return {"lesions": lesions}
    if tool_id is ToolId.FUNDUS_LOCALIZE:
        cx, cy = rng.uniform(150, 350), rng.uniform(150, 350)
        rd = rng.uniform(40, 80)
        rc = rd * rng.uniform(0.2, 0.8)

        def ellipse(r):
            return [[cx + r * math.cos(2 * math.pi * i / 16), cy + r * math.sin(2 * math.pi * i / 16)] for i in range(16)]

        cup, disc = ellipse(rc), ellipse(rd)
        return {"cup": cup, "disc": disc, "cdr": compute_cdr(cup, disc)}
    top = rng.uniform(50, 120)
    retina = [[0, top], [500, top], [500, top + 150], [0, top + 150]]
    choroid = [[0, top + 150], [500, top + 150], [500, top + 220], [0, top + 220]]
    hole = None
    if rng.random() < 0.3:
        hx = rng.uniform(150, 350)
        hole = [[hx, top], [hx + 30, top], [hx + 15, top + 60]]
    return {"choroid": choroid, "retina": retina, "macular_hole": hole}


class StubAdapter:
    """Fixture payloads keyed by image sha256; one ``<tool_id>.json`` per tool."""

    def __init__(self, fixtures: Mapping[str, Mapping[str, dict]] | None = None, synthesize: bool = True):
        self.fixtures = {ToolId(k).value: dict(v) for k, v in (fixtures or {}).items()}
        self.synthesize = synthesize

    @classmethod
    def from_dir(cls, path: str | Path, synthesize: bool = True) -> "StubAdapter":
        fixtures = {}
        for t in ToolId:
            f = Path(path) / f"{t.value}.json"
            if f.exists():
                fixtures[t.value] = json.loads(f.read_text(encoding="utf-8"))
        return cls(fixtures, synthesize)

    def __call__(self, descriptor: ToolDescriptor, image: ImageRef, params: Mapping) -> dict:
        table = self.fixtures.get(descriptor.tool_id.value, {})
        if image.sha256 in table:
            return table[image.sha256]
        if self.synthesize:
            return synthesize_payload(descriptor.tool_id, image.sha256)
        raise ToolError(f"no stub output for {descriptor.tool_id.value} on image {image.sha256[:12]}")


class RemoteToolAdapter:
    """POST ``{tool_id, image, params}`` and return the JSON payload."""

    def __init__(self, transport: Transport | None = None, retries: int = 3, backoff: float = 0.5,
                 timeout: float = 60.0, sleep: Callable[[float], None] = time.sleep):
        self.transport = transport or httpx_transport
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.sleep = sleep

    def __call__(self, descriptor: ToolDescriptor, image: ImageRef, params: Mapping) -> dict:
        body = {
            "tool_id": descriptor.tool_id.value,
            "image": base64.b64encode(image.read_bytes()).decode("ascii"),
            "params": dict(params),
        }
        for attempt in range(self.retries + 1):
            try:
                status, payload = self.transport(descriptor.endpoint, body, {}, self.timeout)
            except TransportError as exc:
                status, payload, problem = None, None, str(exc)
            else:
                problem = f"HTTP {status}"
            if status is None or status == 429 or status >= 500:
                if attempt == self.retries:
                    raise ToolTimeout(f"{descriptor.tool_id.value}: {problem} after {attempt + 1} attempts")
                self.sleep(self.backoff * 2 ** attempt)
                continue
            if status != 200:
                raise ToolError(f"{descriptor.tool_id.value}: HTTP {status}")
            return payload
        raise ToolTimeout(descriptor.tool_id.value)  # pragma: no cover


@dataclass
class ToolRunner:
    """Dispatches invocations to the adapter named by each descriptor."""

    stub: StubAdapter = field(default_factory=StubAdapter)
    remote: RemoteToolAdapter = field(default_factory=RemoteToolAdapter)

    def invoke_tool(
        self,
        descriptor: ToolDescriptor,
        image: ImageRef,
        context: Mapping | None = None,
    ) -> ToolInvocation:
        """Run one tool. Modality mismatch and schema violations raise; the
        caller records them."""
        context = dict(context or {})
        modality = context.get("modality")
        if modality is None:
            modality = classify_modality(image).label
        if not descriptor.accepts(modality):
            raise ModalityMismatch(
                f"{descriptor.tool_id.value} accepts {sorted(m.value for m in descriptor.accepted_modalities)}, "
                f"image {Path(image.path).name} is {Modality(modality).value}"
            )
        adapter = self.stub if descriptor.adapter is Adapter.STUB else self.remote
        started = _now()
        payload = adapter(descriptor, image, context.get("params", {}))
        output = parse_output(descriptor.tool_id, payload)
        finished = _now()
        if not isinstance(output, OUTPUT_TYPES[descriptor.tool_id]):  # pragma: no cover
            raise ToolSchemaError(descriptor.tool_id.value, "output variant does not match tool", payload)
        return ToolInvocation(descriptor.tool_id, image, started, finished, output, None, descriptor.adapter)


def output_summary(inv: ToolInvocation) -> dict:
    return {"tool": inv.tool_id.value, "image": Path(inv.image.path).name,
            "output": None if inv.output is None else inv.output.to_payload(), "error": inv.error}
