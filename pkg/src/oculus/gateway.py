"""Uniform chat-completion access for every agent role.

Two backend kinds share one call surface:

* ``remote_chat`` speaks the OpenAI-compatible ``/chat/completions`` contract
  through an injectable transport.
* ``scripted`` replays a TSV script of ``PATTERN<TAB>REPLY`` rules. Rules that
  share a pattern form a queue: each match serves the next reply and the last
  one repeats. The final ``*`` rule(s) are the mandatory default.

Responses can be cached by a key over backend identity, sampling and the
canonicalized messages (images replaced by their content hashes).
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Sequence
from urllib.parse import urlparse

from .errors import (
    BackendError,
    RateLimitError,
    ScriptError,
    TransportError,
    ValidationError,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "OCULUS_API_KEY"
API_BASE_ENV = "OCULUS_API_BASE"


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"
    TOOL = "tool"


class BackendKind(str, Enum):
    REMOTE_CHAT = "remote_chat"
    SCRIPTED = "scripted"


class CachePolicy(str, Enum):
    OFF = "off"
    READ_WRITE = "read_write"
    READ_ONLY = "read_only"


@dataclass(frozen=True)
class ImageRef:
    """Content-addressed handle to an image on disk."""

    path: str
    sha256: str

    @classmethod
    def from_path(cls, path: str | os.PathLike) -> "ImageRef":
        data = Path(path).read_bytes()
        return cls(str(path), hashlib.sha256(data).hexdigest())

    def read_bytes(self) -> bytes:
        return Path(self.path).read_bytes()


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str
    attachments: tuple[ImageRef, ...] = ()

    def __post_init__(self):
        try:
            object.__setattr__(self, "role", Role(self.role))
        except ValueError:
            raise ValidationError(f"unknown message role {self.role!r}") from None
        object.__setattr__(self, "attachments", tuple(self.attachments))
        if not self.content and not self.attachments:
            raise ValidationError("message content is empty and has no attachments")


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 1024

    def __post_init__(self):
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValidationError("top_p must be in (0, 1]")
        if self.max_tokens <= 0:
            raise ValidationError("max_tokens must be positive")


@dataclass(frozen=True)
class BackendProfile:
    id: str
    kind: BackendKind
    model_name: str = ""
    endpoint: str | None = None
    sampling: Sampling = field(default_factory=Sampling)
    cache_policy: CachePolicy = CachePolicy.OFF
    script: str | None = None
    api_key: str | None = None
    timeout: float = 60.0

    def __post_init__(self):
        object.__setattr__(self, "kind", BackendKind(self.kind))
        object.__setattr__(self, "cache_policy", CachePolicy(self.cache_policy))
        if isinstance(self.sampling, dict):
            object.__setattr__(self, "sampling", Sampling(**self.sampling))
        if not self.id:
            raise ValidationError("backend id is required")
        if self.kind is BackendKind.REMOTE_CHAT:
            if not self.endpoint:
                raise ValidationError(f"remote backend {self.id!r} requires an endpoint")
            if not self.model_name:
                raise ValidationError(f"remote backend {self.id!r} requires model_name")
            parsed = urlparse(self.endpoint)
            if parsed.scheme not in ("http", "https") or not parsed.netloc:
                raise ValidationError(f"malformed endpoint URL {self.endpoint!r}")
        elif not self.script:
            raise ValidationError(f"scripted backend {self.id!r} requires a script file")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["cache_policy"] = self.cache_policy.value
        d["api_key"] = "***" if self.api_key else None
        return d


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class Completion:
    text: str
    usage: Usage
    backend_id: str
    cached: bool = False
    metadata: dict = field(default_factory=dict)


# --- canonicalization -------------------------------------------------------

def canonical_text(content: str) -> str:
    lines = content.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    return "\n".join(line.rstrip() for line in lines).rstrip()


def canonical_messages(messages: Sequence[ChatMessage]) -> list[dict]:
    return [
        {
            "role": m.role.value,
            "content": canonical_text(m.content),
            "images": [a.sha256 for a in m.attachments],
        }
        for m in messages
    ]


def cache_key(profile: BackendProfile, messages: Sequence[ChatMessage]) -> str:
    blob = json.dumps(
        {
            "backend": profile.id,
            "model": profile.model_name,
            "sampling": asdict(profile.sampling),
            "messages": canonical_messages(messages),
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --- scripted backends ------------------------------------------------------

_ESCAPES = {"n": "\n", "t": "\t", "\\": "\\"}


def _unescape(s: str) -> str:
    return re.sub(r"\\([nt\\])", lambda m: _ESCAPES[m.group(1)], s)


@dataclass
class ScriptRule:
    pattern: str
    replies: list[str]
    served: int = 0

    def matches(self, text: str) -> bool:
        if self.pattern == "*":
            return True
        if self.pattern.startswith("re:"):
            return re.search(self.pattern[3:], text, re.DOTALL) is not None
        return self.pattern.lower() in text.lower()

    def next_reply(self) -> str:
        reply = self.replies[min(self.served, len(self.replies) - 1)]
        self.served += 1
        return reply


def parse_script(text: str, source: str = "<script>") -> list[ScriptRule]:
    rules: dict[str, ScriptRule] = {}
    saw_default = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.strip() or raw.startswith("#"):
            continue
        if "\t" not in raw:
            raise ScriptError(f"{source}:{lineno}: expected PATTERN<TAB>REPLY")
        pattern, reply = raw.split("\t", 1)
        if pattern == "*":
            saw_default = True
        elif saw_default:
            raise ScriptError(f"{source}:{lineno}: rule after the default '*' rule")
        rules.setdefault(pattern, ScriptRule(pattern, [])).replies.append(_unescape(reply))
    if not saw_default:
        raise ScriptError(f"{source}: script has no default '*' rule")
    return list(rules.values())


class ScriptedBackend:
    def __init__(self, profile: BackendProfile):
        self.profile = profile
        path = Path(profile.script)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ScriptError(f"unreadable script {path}: {exc}") from exc
        self.script_sha256 = hashlib.sha256(text.encode("utf-8")).hexdigest()
        self.rules = parse_script(text, str(path))
        self._lock = threading.Lock()

    def generate(self, messages: Sequence[ChatMessage]) -> tuple[str, Usage, dict]:
        text = "\n".join(m.content for m in messages)
        with self._lock:
            for rule in self.rules:
                if rule.matches(text):
                    reply = rule.next_reply()
                    break
        meta = {"default_rule": rule.pattern == "*", "rule": rule.pattern}
        usage = Usage(len(text.split()), len(reply.split()))
        return reply, usage, meta


# --- remote backends --------------------------------------------------------

Transport = Callable[[str, dict, dict, float], tuple[int, Any]]


def httpx_transport(url: str, payload: dict, headers: dict, timeout: float) -> tuple[int, Any]:
    import httpx

    try:
        resp = httpx.post(url, json=payload, headers=headers, timeout=timeout)
    except httpx.TimeoutException as exc:
        raise TransportError(f"timeout calling {url}") from exc
    except httpx.TransportError as exc:
        raise TransportError(f"transport failure calling {url}: {exc}") from exc
    try:
        body = resp.json()
    except ValueError:
        body = {"raw": resp.text}
    return resp.status_code, body


def _wire_message(m: ChatMessage) -> dict:
    if not m.attachments:
        return {"role": m.role.value, "content": m.content}
    parts: list[dict] = [{"type": "text", "text": m.content}] if m.content else []
    for img in m.attachments:
        b64 = base64.b64encode(img.read_bytes()).decode("ascii")
        parts.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
    return {"role": m.role.value, "content": parts}


class RemoteBackend:
    def __init__(self, profile: BackendProfile, transport: Transport):
        self.profile = profile
        self.transport = transport

    @property
    def url(self) -> str:
        base = self.profile.endpoint.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"

    def generate(self, messages: Sequence[ChatMessage]) -> tuple[str, Usage, dict]:
        p = self.profile
        payload = {
            "model": p.model_name,
            "messages": [_wire_message(m) for m in messages],
            "temperature": p.sampling.temperature,
            "top_p": p.sampling.top_p,
            "max_tokens": p.sampling.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        key = p.api_key or os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        status, body = self.transport(self.url, payload, headers, p.timeout)
        if status == 429:
            raise RateLimitError(f"{p.id}: rate limited")
        if status >= 500:
            raise TransportError(f"{p.id}: server error {status}")
        if status >= 400:
            raise BackendError(f"{p.id}: HTTP {status}: {body}")
        try:
            text = body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"{p.id}: malformed completion payload") from exc
        u = body.get("usage") or {}
        usage = Usage(int(u.get("prompt_tokens", 0) or 0), int(u.get("completion_tokens", 0) or 0))
        return text, usage, {}


# --- gateway ----------------------------------------------------------------

class Gateway:
    """Registry of backends plus the shared response cache.

    Handles are safe to share across threads; cache access is atomic per key.
    """

    def __init__(
        self,
        transport: Transport | None = None,
        cache_dir: str | os.PathLike | None = None,
        retries: int = 3,
        backoff: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.transport = transport or httpx_transport
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.retries = retries
        self.backoff = backoff
        self.sleep = sleep
        self._backends: dict[str, ScriptedBackend | RemoteBackend] = {}
        self._cache: dict[str, Completion] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}

    def register_backend(self, profile: BackendProfile) -> ScriptedBackend | RemoteBackend:
        with self._lock:
            if profile.id in self._backends:
                raise ValidationError(f"backend exists: {profile.id!r}")
            if profile.kind is BackendKind.SCRIPTED:
                handle = ScriptedBackend(profile)
            else:
                handle = RemoteBackend(profile, self.transport)
            self._backends[profile.id] = handle
        return handle

    def get(self, backend_id: str) -> ScriptedBackend | RemoteBackend:
        try:
            return self._backends[backend_id]
        except KeyError:
            raise ValidationError(f"no backend registered as {backend_id!r}") from None

    def complete(
        self,
        handle: ScriptedBackend | RemoteBackend | str,
        messages: Sequence[ChatMessage],
        require_system: bool = False,
    ) -> Completion:
        if isinstance(handle, str):
            handle = self.get(handle)
        messages = tuple(messages)
        if not messages:
            raise ValidationError("messages must be non-empty")
        if require_system and messages[0].role is not Role.SYSTEM:
            raise ValidationError("first message must have role=system")
        profile = handle.profile
        policy = profile.cache_policy
        if policy is CachePolicy.OFF:
            return self._call(handle, messages)

        key = cache_key(profile, messages)
        with self._key_lock(key):
            hit = self._cache_read(key)
            if hit is not None:
                return Completion(hit.text, hit.usage, hit.backend_id, True, dict(hit.metadata))
            result = self._call(handle, messages)
            if policy is CachePolicy.READ_WRITE:
                self._cache_write(key, result)
            return result

    def _call(self, handle, messages) -> Completion:
        attempt = 0
        while True:
            try:
                text, usage, meta = handle.generate(messages)
                return Completion(text, usage, handle.profile.id, False, meta)
            except TransportError as exc:
                if attempt >= self.retries:
                    raise BackendError(f"{handle.profile.id}: giving up after {attempt + 1} attempts: {exc}") from exc
                delay = self.backoff * (2 ** attempt)
                logger.warning("%s: %s; retrying in %.2fs", handle.profile.id, exc, delay)
                self.sleep(delay)
                attempt += 1

    def _key_lock(self, key: str) -> threading.Lock:
        with self._lock:
            return self._key_locks.setdefault(key, threading.Lock())

    def _cache_read(self, key: str) -> Completion | None:
        if key in self._cache:
            return self._cache[key]
        if self.cache_dir is None:
            return None
        path = self.cache_dir / f"{key}.json"
        if not path.exists():
            return None
        d = json.loads(path.read_text(encoding="utf-8"))
        c = Completion(d["text"], Usage(**d["usage"]), d["backend_id"], False, d.get("metadata", {}))
        self._cache[key] = c
        return c

    def _cache_write(self, key: str, c: Completion) -> None:
        self._cache[key] = c
        if self.cache_dir is None:
            return
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        tmp = self.cache_dir / f"{key}.json.tmp"
        tmp.write_text(
            json.dumps({"text": c.text, "usage": asdict(c.usage), "backend_id": c.backend_id, "metadata": c.metadata}),
            encoding="utf-8",
        )
        os.replace(tmp, self.cache_dir / f"{key}.json")


def system(content: str) -> ChatMessage:
    return ChatMessage(Role.SYSTEM, content)


def user(content: str, attachments: Sequence[ImageRef] = ()) -> ChatMessage:
    return ChatMessage(Role.USER, content, tuple(attachments))
