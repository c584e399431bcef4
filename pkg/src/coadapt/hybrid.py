"""Lexical + dense retrieval channel with multi-route query rewriting."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .corpus import KnowledgeChunk
from .ranking import ScoredChunk, fuse, top_k
from .text import Tokenizer, tokenize

log = logging.getLogger(__name__)

K1 = 1.2
B = 0.75
MAX_REWRITES = 3


class EmptyIndex(Exception):
    pass


class EmbedderFailure(Exception):
    pass


# --- query rewriting -------------------------------------------------------


class Rewriter(Protocol):
    def rewrite(self, query: str) -> Sequence[str]: ...


@dataclass(frozen=True)
class QueryBundle:
    original: str
    rewrites: tuple[str, ...] = ()
    degraded: Optional[str] = None  # reason the rewriter was skipped, if it was

    @property
    def queries(self) -> list[str]:
        return [self.original, *self.rewrites]

    def __len__(self) -> int:
        return 1 + len(self.rewrites)


def rewrite_query(query: str, rewriter: Optional[Rewriter]) -> QueryBundle:
    """Original query plus up to three distinct rewrites.

    Any rewriter failure, including a timeout, degrades to the original query
    alone; the reason is kept on the bundle.
    """
    if not query or not query.strip():
        raise ValueError("query must be non-empty")
    if rewriter is None:
        return QueryBundle(query)
    try:
        variants = list(rewriter.rewrite(query))
    except Exception as exc:
        log.warning("query rewriter failed, using original only: %s", exc)
        return QueryBundle(query, (), f"{type(exc).__name__}: {exc}")
    seen = {query.strip().casefold()}
    rewrites = []
    for v in variants:
        if not isinstance(v, str) or not v.strip():
            continue
        key = v.strip().casefold()
        if key in seen:
            continue
        seen.add(key)
        rewrites.append(v.strip())
        if len(rewrites) == MAX_REWRITES:
            break
    return QueryBundle(query, tuple(rewrites))


# --- BM25 -------------------------------------------------------------------


@dataclass
class LexicalIndex:
    postings: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    doc_lengths: dict[str, int] = field(default_factory=dict)
    avg_doc_len: float = 0.0
    doc_count: int = 0
    tokenizer: Tokenizer = field(default=tokenize, repr=False, compare=False)

    def to_json(self) -> str:
        return json.dumps(
            {
                "postings": {t: [list(p) for p in ps] for t, ps in self.postings.items()},
                "doc_lengths": self.doc_lengths,
                "avg_doc_len": self.avg_doc_len,
                "doc_count": self.doc_count,
            },
            sort_keys=True,
        )

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))


def build_lexical_index(chunks: Iterable[KnowledgeChunk], tokenizer: Tokenizer = tokenize) -> LexicalIndex:
    postings: dict[str, list[tuple[str, int]]] = {}
    lengths: dict[str, int] = {}
    for chunk in sorted(chunks, key=lambda c: c.id):
        tokens = tokenizer(chunk.text)
        lengths[chunk.id] = len(tokens)
        for term, tf in sorted(Counter(tokens).items()):
            postings.setdefault(term, []).append((chunk.id, tf))
    n = len(lengths)
    avg = sum(lengths.values()) / n if n else 0.0
    return LexicalIndex(dict(sorted(postings.items())), lengths, avg, n, tokenizer)


def lexical_retrieve(query: str, index: LexicalIndex, k: int = 10) -> list[ScoredChunk]:
    """BM25 over the distinct query terms; zero-score documents are dropped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.doc_count == 0:
        raise EmptyIndex("lexical index has no documents")
    scores: dict[str, float] = {}
    for term in dict.fromkeys(index.tokenizer(query)):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for cid, tf in plist:
            norm = K1 * (1 - B + B * index.doc_lengths[cid] / index.avg_doc_len)
            scores[cid] = scores.get(cid, 0.0) + idf * tf * (K1 + 1) / (tf + norm)
    return top_k((ScoredChunk(cid, s, "lexical") for cid, s in scores.items() if s > 0), k)


# --- dense -------------------------------------------------------------------


class Embedder(Protocol):
    def embed(self, text: str) -> Sequence[float]: ...


class HashingEmbedder:
    """Feature-hashed bag of words, L2-normalised. Deterministic across runs."""

    def __init__(self, dim: int = 256, tokenizer: Tokenizer = tokenize):
        self.dim = dim
        self.tokenizer = tokenizer

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for tok in self.tokenizer(text):
            vec[self._bucket(tok)] += 1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


@dataclass(frozen=True)
class EmbeddingRecord:
    chunk_id: str
    vector: np.ndarray


def _unit(vector: Sequence[float], dim: Optional[int] = None) -> Optional[np.ndarray]:
    vec = np.asarray(vector, dtype=float)
    if vec.ndim != 1 or (dim is not None and vec.shape[0] != dim):
        raise EmbedderFailure(f"embedding has shape {vec.shape}, expected ({dim},)")
    if not np.all(np.isfinite(vec)):
        raise EmbedderFailure("embedding has non-finite entries")
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else None


def build_dense_index(chunks: Iterable[KnowledgeChunk], embedder: Embedder) -> list[EmbeddingRecord]:
    """Embed every chunk. Chunks with an all-zero embedding are left out."""
    records = []
    dim = None
    for chunk in sorted(chunks, key=lambda c: c.id):
        vec = _unit(embedder.embed(chunk.text), dim)
        if vec is None:
            continue
        dim = vec.shape[0]
        records.append(EmbeddingRecord(chunk.id, vec))
    return records


def dense_retrieve(query: str, embedder: Embedder, records: Sequence[EmbeddingRecord], k: int = 10) -> list[ScoredChunk]:
    """Exhaustive cosine top-k. An embedder failure yields an empty result."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not records:
        return []
    try:
        q = _unit(embedder.embed(query), records[0].vector.shape[0])
    except Exception as exc:
        log.warning("embedder failed, dense channel returns nothing: %s", exc)
        return []
    if q is None:
        return []
    matrix = np.stack([r.vector for r in records])
    sims = matrix @ q
    hits = (
        ScoredChunk(r.chunk_id, min(1.0, float(s)), "dense") for r, s in zip(records, sims) if s > 0
    )
    return top_k(hits, k)


# --- channel -------------------------------------------------------------------


class HybridChannel:
    """Runs lexical and dense retrieval for every bundle query and RRF-fuses them."""

    def __init__(
        self,
        chunks: Iterable[KnowledgeChunk],
        embedder: Optional[Embedder] = None,
        k: int = 10,
        tokenizer: Tokenizer = tokenize,
    ):
        chunks = list(chunks)
        self.k = k
        self.embedder = embedder or HashingEmbedder(tokenizer=tokenizer)
        self.lexical = build_lexical_index(chunks, tokenizer)
        try:
            self.dense = build_dense_index(chunks, self.embedder)
        except Exception as exc:
            log.warning("dense index build failed, lexical only: %s", exc)
            self.dense = []

    def lexical_only(self, query: str, k: Optional[int] = None) -> list[ScoredChunk]:
        try:
            return lexical_retrieve(query, self.lexical, k or self.k)
        except EmptyIndex:
            return []

    def dense_only(self, query: str, k: Optional[int] = None) -> list[ScoredChunk]:
        return dense_retrieve(query, self.embedder, self.dense, k or self.k)

    def _per_query(self, query: str) -> list[list[ScoredChunk]]:
        return [self.lexical_only(query), self.dense_only(query)]

    def retrieve(self, bundle: QueryBundle, k: Optional[int] = None) -> list[ScoredChunk]:
        queries = bundle.queries
        if len(queries) == 1:
            per_query = [self._per_query(queries[0])]
        else:
            with ThreadPoolExecutor(max_workers=len(queries)) as pool:
                per_query = list(pool.map(self._per_query, queries))  # map keeps bundle order
        lists = [lst for pair in per_query for lst in pair]
        return fuse(*lists, k=k or self.k, channel="hybrid")

    def search(self, query: str, mode: str = "hybrid", k: Optional[int] = None) -> list[ScoredChunk]:
        if mode == "lexical":
            return self.lexical_only(query, k)
        if mode == "dense":
            return self.dense_only(query, k)
        if mode == "hybrid":
            return self.retrieve(QueryBundle(query), k)
        raise ValueError(f"unknown channel {mode!r}")
