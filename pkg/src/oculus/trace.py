"""Append-only run records.

On disk a record is JSONL: a header line, one line per event, and a closing
``finalize`` line carrying a SHA-256 digest over every preceding line. Events
are flushed as they are appended so a crashed run still leaves a readable
(unfinalized) prefix.
"""

from __future__ import annotations

import hashlib
import json
import threading
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable

from .errors import IntegrityError, OculusError, ValidationError

SCHEMA_VERSION = 1

EVENT_TYPES = frozenset({
    "prompt", "completion", "retrieval", "observation", "selection", "plan", "reask",
    "tool_invocation", "tool_error", "verdict", "amend", "response", "prediction",
    "metric", "note", "error", "dialogue", "reward",
})


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, default=str)


def new_run_id(prefix: str = "run") -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    return f"{prefix}-{stamp}-{uuid.uuid4().hex[:8]}"


@dataclass
class RunRecord:
    run_id: str
    command: str
    config_snapshot: dict
    inputs: dict
    events: list[dict]
    created_at: str
    schema_version: int = SCHEMA_VERSION
    digest: str | None = None

    def of_type(self, *types: str) -> list[dict]:
        return [e for e in self.events if e["type"] in types]

    def final(self, type_: str) -> dict | None:
        hits = self.of_type(type_)
        return hits[-1] if hits else None


class RunRecorder:
    """Single writer for one RunRecord; ``path=None`` keeps it in memory."""

    def __init__(self, command: str, config_snapshot: dict | None = None, inputs: dict | None = None,
                 path: str | Path | None = None, run_id: str | None = None):
        self.run_id = run_id or new_run_id()
        self.command = command
        self.config_snapshot = config_snapshot or {}
        self.inputs = inputs or {}
        self.created_at = _now()
        self.events: list[dict] = []
        self.path = Path(path) if path else None
        self.finalized = False
        self._hash = hashlib.sha256()
        self._lock = threading.Lock()
        self._fh = None
        header = {
            "kind": "header", "schema_version": SCHEMA_VERSION, "run_id": self.run_id,
            "command": self.command, "created_at": self.created_at,
            "config_snapshot": self.config_snapshot, "inputs": self.inputs,
        }
        self._write(_dump(header))

    def _write(self, line: str) -> None:
        self._hash.update(line.encode("utf-8") + b"\n")
        if self.path is not None:
            if self._fh is None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self._fh = self.path.open("w", encoding="utf-8")
            self._fh.write(line + "\n")
            self._fh.flush()

    def append_event(self, type_: str, stage: str | None = None, **data) -> dict:
        if type_ not in EVENT_TYPES:
            raise ValidationError(f"unknown event type {type_!r}")
        with self._lock:
            if self.finalized:
                raise OculusError(f"run {self.run_id} is finalized; cannot append")
            event = {"seq": len(self.events), "type": type_, "stage": stage, "ts": _now(), **data}
            line = _dump(event)
            self.events.append(json.loads(line))
            self._write(line)
            return event

    def extend(self, events: Iterable[dict]) -> None:
        """Append pre-built events (e.g. an item-local buffer) in order."""
        for e in events:
            data = {k: v for k, v in e.items() if k not in ("seq", "type", "stage", "ts")}
            self.append_event(e["type"], e.get("stage"), **data)

    def finalize(self) -> RunRecord:
        with self._lock:
            if self.finalized:
                raise OculusError(f"run {self.run_id} already finalized")
            digest = self._hash.hexdigest()
            line = _dump({"kind": "finalize", "digest": digest, "count": len(self.events)})
            if self.path is not None:
                self._write(line)
                self._fh.close()
            self.finalized = True
        return self.record(digest)

    def record(self, digest: str | None = None) -> RunRecord:
        return RunRecord(self.run_id, self.command, self.config_snapshot, self.inputs,
                         list(self.events), self.created_at, SCHEMA_VERSION, digest)


class EventBuffer:
    """Item-local event list with the same ``append_event`` surface."""

    def __init__(self, **tags):
        self.tags = tags
        self.events: list[dict] = []

    def append_event(self, type_: str, stage: str | None = None, **data) -> dict:
        if type_ not in EVENT_TYPES:
            raise ValidationError(f"unknown event type {type_!r}")
        event = {"seq": len(self.events), "type": type_, "stage": stage, **self.tags, **data}
        event = json.loads(_dump(event))
        self.events.append(event)
        return event


def load_run(path: str | Path, verify: bool = True) -> RunRecord:
    # split on "\n" only: event text may contain U+0085 / U+2028, which splitlines() treats as breaks
    text = Path(path).read_text(encoding="utf-8")
    lines = [line for line in text.split("\n") if line]
    if not lines:
        raise IntegrityError(f"{path}: empty run file")
    header = json.loads(lines[0])
    if header.get("kind") != "header":
        raise IntegrityError(f"{path}: missing header")
    tail = json.loads(lines[-1]) if len(lines) > 1 else {}
    finalized = tail.get("kind") == "finalize"
    body = lines[1:-1] if finalized else lines[1:]
    if verify:
        if not finalized:
            raise IntegrityError(f"{path}: run was never finalized")
        h = hashlib.sha256()
        for line in lines[:-1]:
            h.update(line.encode("utf-8") + b"\n")
        if h.hexdigest() != tail["digest"]:
            raise IntegrityError(f"{path}: digest mismatch")
    events = [json.loads(line) for line in body]
    for i, e in enumerate(events):
        if e.get("seq") != i:
            raise IntegrityError(f"{path}: event sequence broken at line {i + 2}")
    return RunRecord(header["run_id"], header["command"], header["config_snapshot"], header["inputs"],
                     events, header["created_at"], header["schema_version"], tail.get("digest"))


def run_path(runs_dir: str | Path, run_id: str) -> Path:
    return Path(runs_dir) / f"{run_id}.jsonl"
