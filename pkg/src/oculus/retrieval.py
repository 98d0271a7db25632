"""Knowledge-level retrieval: ingest sources, chunk, embed, and rank by cosine.

The index is a flat list scanned exhaustively, so rankings are exact.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from html.parser import HTMLParser
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .errors import EmbedderError, RetrievalError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 1000
DEFAULT_OVERLAP = 200
DEFAULT_K = 5

INDEX_FORMAT = "oculus-index"
INDEX_VERSION = 1

RETRIEVAL_SYSTEM_PROMPT = (
    "You are an ophthalmology knowledge assistant. Using only the reference passages "
    "provided, write a concise clinical background relevant to the query. Cite passages "
    "by their [n] markers and do not add facts that are not in the passages."
)


@dataclass(frozen=True)
class SourceDocument:
    source_uri: str
    raw_text: str
    fetched_at: str


@dataclass(frozen=True)
class Chunk:
    doc_ref: str
    ordinal: int
    text: str
    embedding: tuple[float, ...]
    start: int = 0


@dataclass(frozen=True)
class Hit:
    chunk: Chunk
    score: float


@dataclass
class ContextBundle:
    query: str
    hits: list[Hit]
    synthesized_context: str
    truncated: bool = False

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "hits": [
                {"doc_ref": h.chunk.doc_ref, "ordinal": h.chunk.ordinal, "score": h.score}
                for h in self.hits
            ],
            "synthesized_context": self.synthesized_context,
            "truncated": self.truncated,
        }


@dataclass
class IngestResult:
    documents: list[SourceDocument]
    warnings: list[str] = field(default_factory=list)


# --- HTML extraction --------------------------------------------------------

class _TextExtractor(HTMLParser):
    _SKIP = {"script", "style", "noscript", "head", "template"}

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag, attrs):
        if tag in self._SKIP:
            self._skip_depth += 1

    def handle_endtag(self, tag):
        if tag in self._SKIP and self._skip_depth:
            self._skip_depth -= 1

    def handle_data(self, data):
        if not self._skip_depth:
            self.parts.append(data)


def strip_html(markup: str) -> str:
    parser = _TextExtractor()
    parser.feed(markup)
    parser.close()
    return " ".join(" ".join(parser.parts).split())


_TAG = re.compile(r"</?[A-Za-z][A-Za-z0-9]*(\s[^<>]*)?/?>")


def _looks_like_html(name: str, text: str) -> bool:
    if name.lower().endswith((".html", ".htm")):
        return True
    head = text.lstrip()[:200].lower()
    if head.startswith("<!doctype html") or head.startswith("<html") or "<body" in head:
        return True
    # fetched pages are often fragments; local .txt/.md files are taken literally
    return name.startswith(("http://", "https://")) and _TAG.search(text) is not None


def read_source_list(path: str | Path) -> list[str]:
    """One URI per line; ``#`` starts a comment."""
    uris = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            uris.append(line)
    return uris


def _fetch_http(uri: str) -> str:
    import httpx

    resp = httpx.get(uri, timeout=30.0, follow_redirects=True)
    resp.raise_for_status()
    return resp.text


def ingest_sources(
    uris: Sequence[str],
    fetch: Callable[[str], str] | None = None,
    base_dir: str | Path | None = None,
) -> IngestResult:
    """Fetch and extract text for every URI; failures become warnings."""
    if not uris:
        raise ValidationError("source list is empty")
    fetch = fetch or _fetch_http
    docs, warnings = [], []
    for uri in uris:
        try:
            if uri.startswith(("http://", "https://")):
                text = fetch(uri)
            else:
                p = Path(uri[7:] if uri.startswith("file://") else uri)
                if base_dir is not None and not p.is_absolute():
                    p = Path(base_dir) / p
                text = p.read_text(encoding="utf-8", errors="replace")
        except Exception as exc:  # per-URI isolation
            warnings.append(f"{uri}: fetch failed: {exc}")
            continue
        if _looks_like_html(uri, text):
            text = strip_html(text)
        if not text.strip():
            warnings.append(f"{uri}: extraction yielded empty text")
            continue
        stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        docs.append(SourceDocument(uri, text, stamp))
    for w in warnings:
        logger.warning(w)
    if not docs:
        raise RetrievalError("empty corpus: every source failed")
    return IngestResult(docs, warnings)


# --- embedding --------------------------------------------------------------

class Embedder(Protocol):
    id: str
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


_TOKEN = re.compile(r"\w+", re.UNICODE)


class HashingEmbedder:
    """Bag-of-tokens feature hashing into ``dim`` buckets, L2-normalized."""

    def __init__(self, dim: int = 256):
        self.dim = dim
        self.id = f"hashing-{dim}"

    def _bucket(self, token: str) -> int:
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(h, "little") % self.dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, t in enumerate(texts):
            for tok in _TOKEN.findall(t.lower()):
                out[i, self._bucket(tok)] += 1.0
            norm = np.linalg.norm(out[i])
            if norm > 0:
                out[i] /= norm
        return out


class RemoteEmbedder:
    """OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, endpoint: str, model: str, dim: int, api_key: str | None = None, transport=None):
        from .gateway import httpx_transport

        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.dim = dim
        self.api_key = api_key
        self.transport = transport or httpx_transport
        self.id = f"remote-{model}-{dim}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        url = self.endpoint if self.endpoint.endswith("/embeddings") else self.endpoint + "/embeddings"
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            status, body = self.transport(url, {"model": self.model, "input": list(texts)}, headers, 60.0)
        except Exception as exc:
            raise EmbedderError(f"embedding request failed: {exc}") from exc
        if status != 200:
            raise EmbedderError(f"embedding endpoint returned HTTP {status}")
        vecs = np.asarray([row["embedding"] for row in body["data"]], dtype=np.float64)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        return np.divide(vecs, norms, out=np.zeros_like(vecs), where=norms > 0)


# --- chunking ---------------------------------------------------------------

def chunk_spans(n: int, chunk_size: int, overlap: int) -> list[tuple[int, int]]:
    """(start, end) spans; starts step by ``chunk_size - overlap`` while inside the text."""
    if not chunk_size > overlap >= 0:
        raise ValidationError("require chunk_size > overlap >= 0")
    if n <= chunk_size:
        return [(0, n)]
    step = chunk_size - overlap
    return [(s, min(s + chunk_size, n)) for s in range(0, n, step)]


@dataclass
class Index:
    embedder_id: str
    dim: int
    chunks: list[Chunk]
    _matrix: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.asarray([c.embedding for c in self.chunks], dtype=np.float64).reshape(-1, self.dim)
        return self._matrix

    def dumps(self) -> str:
        header = {"format": INDEX_FORMAT, "version": INDEX_VERSION, "d": self.dim,
                  "count": len(self.chunks), "embedder": self.embedder_id}
        lines = [json.dumps(header, sort_keys=True)]
        for c in self.chunks:
            lines.append(json.dumps([c.doc_ref, c.ordinal, c.text, list(c.embedding), c.start], ensure_ascii=False))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Index":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").split("\n") if ln]
        if not lines:
            raise RetrievalError(f"{path}: empty index file")
        header = json.loads(lines[0])
        if header.get("format") != INDEX_FORMAT:
            raise RetrievalError(f"{path}: not an index file")
        chunks = []
        for line in lines[1:]:
            doc_ref, ordinal, text, emb, start = json.loads(line)
            if len(emb) != header["d"]:
                raise RetrievalError(f"{path}: embedding dimension mismatch")
            chunks.append(Chunk(doc_ref, ordinal, text, tuple(emb), start))
        if len(chunks) != header["count"]:
            raise RetrievalError(f"{path}: header count {header['count']} != {len(chunks)} records")
        return cls(header["embedder"], header["d"], chunks)


def chunk_and_embed(
    corpus: Iterable[SourceDocument],
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
    embedder: Embedder | None = None,
) -> Index:
    embedder = embedder or HashingEmbedder()
    corpus = list(corpus)
    if not corpus:
        raise RetrievalError("empty corpus")
    pieces = []
    for doc in corpus:
        for ordinal, (s, e) in enumerate(chunk_spans(len(doc.raw_text), chunk_size, overlap)):
            pieces.append((doc.source_uri, ordinal, doc.raw_text[s:e], s))
    try:
        vecs = embedder.embed([p[2] for p in pieces])
    except EmbedderError:
        raise
    except Exception as exc:
        raise EmbedderError(f"embedder {embedder.id} failed: {exc}") from exc
    if vecs.shape != (len(pieces), embedder.dim):
        raise EmbedderError(f"embedder returned shape {vecs.shape}, expected ({len(pieces)}, {embedder.dim})")
    chunks = [
        Chunk(doc_ref, ordinal, text, tuple(float(x) for x in vec), start)
        for (doc_ref, ordinal, text, start), vec in zip(pieces, vecs)
    ]
    return Index(embedder.id, embedder.dim, chunks)


# scores equal to this many decimals count as tied; float noise would otherwise
# order mathematically equal cosines arbitrarily
TIE_DECIMALS = 12


def rank(index: Index, query_vec: np.ndarray, k: int) -> list[Hit]:
    scores = index.matrix @ query_vec
    keys = np.round(scores, TIE_DECIMALS)
    order = sorted(
        range(len(index.chunks)),
        key=lambda i: (-keys[i], index.chunks[i].doc_ref, index.chunks[i].ordinal),
    )
    return [Hit(index.chunks[i], float(scores[i])) for i in order[:k]]


def format_passages(hits: Sequence[Hit]) -> str:
    return "\n\n".join(f"[{n}] ({h.chunk.doc_ref}#{h.chunk.ordinal}) {h.chunk.text}" for n, h in enumerate(hits, 1))


def retrieve(
    index: Index,
    query: str,
    k: int = DEFAULT_K,
    embedder: Embedder | None = None,
    synthesize: Callable[[str, str], str] | None = None,
) -> ContextBundle:
    """Top-k chunks by cosine similarity, ties by (doc_ref, ordinal).

    ``synthesize(query, passages)`` turns the hits into background text; without
    it the formatted passages are used verbatim.
    """
    if k <= 0:
        raise ValidationError("k must be positive")
    if not len(index):
        raise RetrievalError("index is empty")
    embedder = embedder or HashingEmbedder(index.dim)
    if embedder.id != index.embedder_id:
        raise EmbedderError(f"query embedder {embedder.id} does not match index embedder {index.embedder_id}")
    try:
        qvec = embedder.embed([query])[0]
    except EmbedderError:
        raise
    except Exception as exc:
        raise EmbedderError(f"embedder {embedder.id} failed: {exc}") from exc
    truncated = k > len(index)
    hits = rank(index, qvec, k)
    passages = format_passages(hits)
    context = synthesize(query, passages) if synthesize else passages
    return ContextBundle(query, hits, context, truncated)
