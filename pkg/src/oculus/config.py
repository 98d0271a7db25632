"""One YAML/JSON config drives every command.

Relative paths resolve against the config file. ``${VAR}`` placeholders are
interpolated from the environment at load time; the stored snapshot keeps the
placeholders so secrets never land in run records.
"""

from __future__ import annotations

import copy
import hashlib
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError, ValidationError
from .gateway import API_BASE_ENV, API_KEY_ENV, BackendKind, BackendProfile, Gateway
from .harness import STAGES, Pipeline, PipelineConfig, PromptTemplate
from .retrieval import (
    DEFAULT_CHUNK_SIZE,
    DEFAULT_K,
    DEFAULT_OVERLAP,
    HashingEmbedder,
    Index,
    RemoteEmbedder,
    chunk_and_embed,
    ingest_sources,
    read_source_list,
)
from .tools import Adapter, RemoteToolAdapter, StubAdapter, ToolDescriptor, ToolRegistry, ToolRunner, default_descriptors

ROLES = ("rag_synth", "planner", "evaluator", "generator", "answerer")

_TOP_KEYS = {"backends", "retry_limit", "ablation", "static_plan", "rag", "tools", "harness",
             "robustness", "cache_dir", "runs_dir", "strict"}
_SECTION_KEYS = {
    "rag": {"index", "sources", "chunk_size", "overlap", "k", "embedder"},
    "tools": {"stub_dir", "synthesize", "registry"},
    "harness": {"parallelism", "regex_fallback", "template"},
    "robustness": {"lexicon", "generator_role", "evaluator_role", "max_turns"},
}
_BACKEND_KEYS = {"id", "kind", "endpoint", "model_name", "sampling", "cache_policy", "script", "api_key", "timeout"}
_PATH_KEYS = {("rag", "index"), ("rag", "sources"), ("tools", "stub_dir"), ("harness", "template"),
              ("robustness", "lexicon")}

_PLACEHOLDER = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def interpolate(value: Any, env: Mapping[str, str] | None = None) -> Any:
    env = os.environ if env is None else env
    if isinstance(value, str):
        def sub(m):
            name = m.group(1)
            if name not in env:
                raise ConfigError(f"environment variable {name} is not set")
            return env[name]
        return _PLACEHOLDER.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate(v, env) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v, env) for v in value]
    return value


@dataclass
class RagParams:
    index: str | None = None
    sources: str | None = None
    chunk_size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_OVERLAP
    k: int = DEFAULT_K
    embedder: dict = field(default_factory=lambda: {"kind": "hashing", "dim": 256})


@dataclass
class ToolParams:
    stub_dir: str | None = None
    synthesize: bool = True
    registry: list[dict] | None = None


@dataclass
class HarnessParams:
    parallelism: int = 4
    regex_fallback: bool = True
    template: str | None = None


@dataclass
class RobustnessParams:
    lexicon: str | None = None
    generator_role: str = "generator"
    evaluator_role: str = "evaluator"
    max_turns: int = 5


@dataclass
class Config:
    backends: dict[str, BackendProfile]
    retry_limit: int = 3
    ablation: frozenset[str] = frozenset()
    static_plan: list[str] | None = None
    rag: RagParams = field(default_factory=RagParams)
    tools: ToolParams = field(default_factory=ToolParams)
    harness: HarnessParams = field(default_factory=HarnessParams)
    robustness: RobustnessParams = field(default_factory=RobustnessParams)
    cache_dir: str | None = None
    runs_dir: str = "runs"
    raw: dict = field(default_factory=dict, repr=False)

    def required_roles(self, command: str = "bench") -> list[str]:
        roles = []
        if "tools" in self.ablation:
            roles.append("generator")
        else:
            roles.append("answerer")
        if "rag" in self.ablation:
            roles.append("rag_synth")
        if "decision" in self.ablation:
            roles.append("planner")
        if "evaluation" in self.ablation:
            roles.append("evaluator")
        if command == "robust":
            roles += [self.robustness.generator_role, self.robustness.evaluator_role]
        return roles

    def check_roles(self, command: str = "bench") -> None:
        missing = [r for r in self.required_roles(command) if r not in self.backends]
        if missing:
            raise ConfigError(f"enabled stages need backend roles: {', '.join(sorted(set(missing)))}")

    def snapshot(self) -> dict:
        snap = copy.deepcopy(self.raw)
        digests = {}
        for role, prof in self.backends.items():
            if prof.script:
                try:
                    digests[role] = hashlib.sha256(Path(prof.script).read_bytes()).hexdigest()
                except OSError:
                    digests[role] = None
        return {"config": snap, "script_digests": digests}


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None or _PLACEHOLDER.search(p):
        return p
    path = Path(p).expanduser()
    return str(path if path.is_absolute() else (base / path).resolve())


def _strict_keys(d: Mapping, allowed: set, where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def config_from_dict(data: Mapping, base_dir: str | Path = ".", env: Mapping[str, str] | None = None) -> Config:
    if not isinstance(data, Mapping):
        raise ConfigError("config must be a mapping")
    base = Path(base_dir)
    raw = copy.deepcopy(dict(data))
    strict = raw.get("strict", True)
    if strict:
        _strict_keys(raw, _TOP_KEYS, "config")
        for section, allowed in _SECTION_KEYS.items():
            if isinstance(raw.get(section), Mapping):
                _strict_keys(raw[section], allowed, section)

    # resolve paths in the raw copy so snapshots are relocatable to replay
    for section, key in _PATH_KEYS:
        if isinstance(raw.get(section), dict) and raw[section].get(key):
            raw[section][key] = _resolve(base, raw[section][key])
    for key in ("cache_dir", "runs_dir"):
        if raw.get(key):
            raw[key] = _resolve(base, raw[key])
    backends_raw = raw.get("backends") or {}
    if not isinstance(backends_raw, Mapping):
        raise ConfigError("backends must map role -> profile")
    for role, prof in backends_raw.items():
        if not isinstance(prof, dict):
            raise ConfigError(f"backend {role}: profile must be a mapping")
        if strict:
            _strict_keys(prof, _BACKEND_KEYS, f"backends.{role}")
        prof.setdefault("id", role)
        if prof.get("script"):
            prof["script"] = _resolve(base, prof["script"])
        if prof.get("kind") == BackendKind.REMOTE_CHAT.value:
            prof.setdefault("endpoint", f"${{{API_BASE_ENV}}}")
            prof.setdefault("api_key", f"${{{API_KEY_ENV}}}")

    data = interpolate(raw, env)
    backends = {}
    for role, prof in (data.get("backends") or {}).items():
        try:
            backends[role] = BackendProfile(**prof)
        except (TypeError, ValueError, ValidationError) as exc:
            raise ConfigError(f"backend {role}: {exc}") from exc

    ablation = data.get("ablation") or []
    if isinstance(ablation, str):
        ablation = [ablation]
    unknown = sorted(set(ablation) - set(STAGES))
    if unknown:
        raise ConfigError(f"unknown ablation stage(s): {', '.join(unknown)}")

    def section(cls, key):
        try:
            return cls(**(data.get(key) or {}))
        except TypeError as exc:
            raise ConfigError(f"{key}: {exc}") from exc

    cfg = Config(
        backends=backends,
        retry_limit=int(data.get("retry_limit", 3)),
        ablation=frozenset(ablation),
        static_plan=data.get("static_plan"),
        rag=section(RagParams, "rag"),
        tools=section(ToolParams, "tools"),
        harness=section(HarnessParams, "harness"),
        robustness=section(RobustnessParams, "robustness"),
        cache_dir=data.get("cache_dir"),
        runs_dir=data.get("runs_dir") or str((base / "runs").resolve()),
        raw=raw,
    )
    if cfg.retry_limit < 1:
        raise ConfigError("retry_limit must be >= 1")
    if "rag" in cfg.ablation and not (cfg.rag.index or cfg.rag.sources):
        raise ConfigError("rag stage needs rag.index or rag.sources")
    try:
        cfg.pipeline_config()
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.check_roles()
    return cfg


def load_config(path: str | Path, env: Mapping[str, str] | None = None) -> Config:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data or {}, path.parent, env)


def _pipeline_config(cfg: Config) -> PipelineConfig:
    return PipelineConfig(
        stages=cfg.ablation, parallelism=cfg.harness.parallelism, regex_fallback=cfg.harness.regex_fallback,
        static_plan=cfg.static_plan, retry_limit=cfg.retry_limit, rag_k=cfg.rag.k,
    )


Config.pipeline_config = _pipeline_config


# --- runtime assembly -------------------------------------------------------

@dataclass
class Runtime:
    config: Config
    gateway: Gateway
    agents: dict[str, Any]
    registry: ToolRegistry
    runner: ToolRunner
    template: PromptTemplate
    index: Index | None = None
    embedder: Any = None

    def pipeline(self) -> Pipeline:
        return Pipeline(self.gateway, self.agents, self.config.pipeline_config(), self.template,
                        self.index, self.embedder, self.registry, self.runner)


def make_embedder(spec: Mapping):
    kind = spec.get("kind", "hashing")
    if kind == "hashing":
        return HashingEmbedder(int(spec.get("dim", 256)))
    if kind == "remote":
        return RemoteEmbedder(spec["endpoint"], spec["model"], int(spec["dim"]), spec.get("api_key"))
    raise ConfigError(f"unknown embedder kind {kind!r}")


def build_registry(entries: list[dict] | None) -> ToolRegistry:
    if not entries:
        return ToolRegistry()
    defaults = {d.tool_id.value: d for d in default_descriptors()}
    descs = []
    for e in entries:
        base = defaults.get(e.get("tool_id"))
        if base is None:
            raise ConfigError(f"unknown tool id {e.get('tool_id')!r}")
        descs.append(ToolDescriptor(
            base.tool_id, e.get("accepted_modalities", base.accepted_modalities),
            e.get("description", base.description), Adapter(e.get("adapter", "stub")),
            e.get("endpoint"), tuple(e.get("aliases", base.aliases)),
        ))
    return ToolRegistry(descs)


def build_runtime(cfg: Config, gateway: Gateway | None = None, need_index: bool | None = None) -> Runtime:
    gateway = gateway or Gateway(cache_dir=cfg.cache_dir)
    agents: dict[str, Any] = {}
    by_id: dict[str, BackendProfile] = {}
    for role, prof in cfg.backends.items():
        if prof.id in by_id:
            if by_id[prof.id] != prof:
                raise ConfigError(f"backend id {prof.id!r} reused with a different profile")
            agents[role] = gateway.get(prof.id)
            continue
        by_id[prof.id] = prof
        agents[role] = gateway.register_backend(prof)

    embedder = make_embedder(cfg.rag.embedder)
    index = None
    if need_index if need_index is not None else "rag" in cfg.ablation:
        if cfg.rag.index and Path(cfg.rag.index).exists():
            index = Index.load(cfg.rag.index)
        elif cfg.rag.sources:
            src = Path(cfg.rag.sources)
            corpus = ingest_sources(read_source_list(src), base_dir=src.parent)
            index = chunk_and_embed(corpus.documents, cfg.rag.chunk_size, cfg.rag.overlap, embedder)
        else:
            raise ConfigError("rag stage enabled but index file is missing and no sources are configured")

    stub = StubAdapter.from_dir(cfg.tools.stub_dir, cfg.tools.synthesize) if cfg.tools.stub_dir \
        else StubAdapter(synthesize=cfg.tools.synthesize)
    runner = ToolRunner(stub=stub, remote=RemoteToolAdapter())
    template = PromptTemplate.load(cfg.harness.template)
    return Runtime(cfg, gateway, agents, build_registry(cfg.tools.registry), runner, template, index, embedder)
