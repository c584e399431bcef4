"""Parallel graph + hybrid retrieval with deadlines, merge, rerank and token budget."""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import Future, ThreadPoolExecutor, TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence

from .hybrid import QueryBundle, Rewriter, rewrite_query
from .ranking import RRF_K, ScoredChunk
from .text import content_terms, whitespace_token_count

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 8192


@dataclass
class OrchestratorConfig:
    graph_timeout_ms: int = 852
    hybrid_timeout_ms: int = 167
    rerank_timeout_ms: int = 557
    rewrite_timeout_ms: int = 690
    budget_tokens: int = DEFAULT_BUDGET
    graph_k: int = 10
    hybrid_k: int = 10
    hops: int = 2
    final_k: Optional[int] = None  # None keeps every merged candidate
    simple_query_max_terms: int = 3
    force_both: bool = False

    @classmethod
    def from_mapping(cls, data: Mapping) -> "OrchestratorConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class ChannelPlan:
    use_graph: bool = True
    use_hybrid: bool = True
    graph_timeout_ms: int = 852
    hybrid_timeout_ms: int = 167

    def __post_init__(self):
        if not (self.use_graph or self.use_hybrid):
            raise ValueError("at least one channel must be enabled")


@dataclass(frozen=True)
class Event:
    stage: str
    kind: str
    detail: str = ""

    def as_dict(self) -> dict:
        return {"stage": self.stage, "kind": self.kind, "detail": self.detail}


@dataclass(frozen=True)
class Candidate:
    chunk_id: str
    score: float
    channels: tuple[str, ...]
    text: Optional[str] = None


@dataclass(frozen=True)
class EvidenceItem:
    chunk_id: str
    text: str
    score: float
    channels: tuple[str, ...]
    tokens: int


@dataclass
class EvidenceSet:
    items: list[EvidenceItem] = field(default_factory=list)
    token_count: int = 0
    events: list[Event] = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return [i.chunk_id for i in self.items]

    @property
    def texts(self) -> list[str]:
        return [i.text for i in self.items]

    @property
    def provenance(self) -> dict[str, tuple[str, ...]]:
        return {i.chunk_id: i.channels for i in self.items}

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class RetrievalResult:
    evidence: EvidenceSet
    plan: ChannelPlan
    bundle: QueryBundle
    channel_results: dict[str, list[ScoredChunk]]
    merged: list[Candidate]
    timings_ms: dict[str, float]
    events: list[Event]


class Reranker(Protocol):
    def score(self, query: str, passages: Sequence[str]) -> Sequence[float]: ...


class GraphChannel(Protocol):
    def seeds(self, query: str) -> list[str]: ...
    def retrieve(self, query: str, hops: int, k: int) -> list[ScoredChunk]: ...


class HybridRetriever(Protocol):
    def retrieve(self, bundle: QueryBundle, k: Optional[int] = None) -> list[ScoredChunk]: ...


def dedup_key(item: ScoredChunk) -> str:
    if item.chunk_id:
        return item.chunk_id
    return "sha256:" + hashlib.sha256((item.text or "").encode("utf-8")).hexdigest()


def merge_dedup(lists: Mapping[str, Sequence[ScoredChunk]], constant: int = RRF_K) -> list[Candidate]:
    """RRF across channels; one candidate per chunk, tagged with every contributing channel."""
    scores: dict[str, float] = {}
    channels: dict[str, list[str]] = {}
    texts: dict[str, Optional[str]] = {}
    for channel in sorted(lists):
        seen: set[str] = set()
        rank = 0
        for item in lists[channel]:
            key = dedup_key(item)
            if key in seen:
                continue
            seen.add(key)
            rank += 1
            scores[key] = scores.get(key, 0.0) + 1.0 / (constant + rank)
            channels.setdefault(key, []).append(channel)
            texts.setdefault(key, item.text)
    ordered = sorted(scores, key=lambda key: (-scores[key], key))
    return [Candidate(key, scores[key], tuple(channels[key]), texts[key]) for key in ordered]


def _call_with_timeout(fn: Callable, timeout_s: float):
    pool = ThreadPoolExecutor(max_workers=1)
    try:
        return pool.submit(fn).result(timeout=timeout_s)
    finally:
        pool.shutdown(wait=False, cancel_futures=True)


def rerank(
    query: str,
    candidates: Sequence[Candidate],
    reranker: Optional[Reranker],
    text_of: Callable[[Candidate], str],
    k: Optional[int] = None,
    timeout_ms: Optional[int] = None,
    events: Optional[list[Event]] = None,
) -> list[Candidate]:
    """Order by reranker score (stable on ties). Failures keep the incoming order."""
    ordered = list(candidates)
    if reranker is not None and ordered:
        passages = [text_of(c) for c in ordered]
        try:
            if timeout_ms is None:
                scores = list(reranker.score(query, passages))
            else:
                scores = list(_call_with_timeout(lambda: reranker.score(query, passages), timeout_ms / 1000))
            if len(scores) != len(ordered):
                raise ValueError(f"reranker returned {len(scores)} scores for {len(ordered)} passages")
            position = sorted(range(len(ordered)), key=lambda i: -float(scores[i]))
            ordered = [ordered[i] for i in position]
        except Exception as exc:
            kind = "timeout" if isinstance(exc, FutureTimeout) else "failure"
            log.warning("reranker %s, keeping merge order: %s", kind, exc)
            if events is not None:
                events.append(Event("rerank", kind, str(exc) or type(exc).__name__))
    return ordered[:k] if k is not None else ordered


def truncate_to_budget(
    items: Sequence[Candidate],
    budget_tokens: int,
    text_of: Callable[[Candidate], str],
    counter: Callable[[str], int] = whitespace_token_count,
) -> EvidenceSet:
    """Longest prefix whose token total fits the budget; chunks are never split."""
    if budget_tokens < 0:
        raise ValueError("budget_tokens must be >= 0")
    out = EvidenceSet()
    for cand in items:
        text = text_of(cand)
        tokens = counter(text)
        if out.token_count + tokens > budget_tokens:
            if not out.items and budget_tokens > 0:
                out.events.append(Event("truncate", "oversized_first_chunk", f"{cand.chunk_id} has {tokens} tokens"))
            break
        out.items.append(EvidenceItem(cand.chunk_id, text, cand.score, cand.channels, tokens))
        out.token_count += tokens
    return out


class Orchestrator:
    def __init__(
        self,
        hybrid: HybridRetriever,
        graph: Optional[GraphChannel] = None,
        text_lookup: Optional[Callable[[str], str]] = None,
        rewriter: Optional[Rewriter] = None,
        reranker: Optional[Reranker] = None,
        config: Optional[OrchestratorConfig] = None,
        token_counter: Callable[[str], int] = whitespace_token_count,
    ):
        self.hybrid = hybrid
        self.graph = graph
        self.text_lookup = text_lookup or (lambda cid: "")
        self.rewriter = rewriter
        self.reranker = reranker
        self.config = config or OrchestratorConfig()
        self.token_counter = token_counter

    def text_of(self, cand: Candidate) -> str:
        if cand.text is not None:
            return cand.text
        return self.text_lookup(cand.chunk_id)

    def route(self, query: str, config: Optional[OrchestratorConfig] = None) -> ChannelPlan:
        """Disable the graph channel for short queries that name no graph entity."""
        if not query or not query.strip():
            raise ValueError("query must be non-empty")
        cfg = config or self.config
        timeouts = dict(graph_timeout_ms=cfg.graph_timeout_ms, hybrid_timeout_ms=cfg.hybrid_timeout_ms)
        if self.graph is None:
            return ChannelPlan(use_graph=False, use_hybrid=True, **timeouts)
        if cfg.force_both:
            return ChannelPlan(True, True, **timeouts)
        hits = self.graph.seeds(query)
        simple = len(content_terms(query)) <= cfg.simple_query_max_terms and not hits
        return ChannelPlan(use_graph=not simple, use_hybrid=True, **timeouts)

    def _rewrite(self, query: str, cfg: OrchestratorConfig, events: list[Event]) -> QueryBundle:
        if self.rewriter is None:
            return QueryBundle(query)
        try:
            return _call_with_timeout(lambda: rewrite_query(query, self.rewriter), cfg.rewrite_timeout_ms / 1000)
        except FutureTimeout:
            events.append(Event("rewrite", "timeout", f"> {cfg.rewrite_timeout_ms} ms"))
            log.warning("query rewriting timed out, using original query only")
            return QueryBundle(query, (), "timeout")

    def retrieve(
        self,
        query: str,
        config: Optional[OrchestratorConfig] = None,
        plan: Optional[ChannelPlan] = None,
    ) -> RetrievalResult:
        cfg = config or self.config
        events: list[Event] = []
        timings: dict[str, float] = {}

        t0 = time.perf_counter()
        bundle = self._rewrite(query, cfg, events)
        if bundle.degraded and bundle.degraded != "timeout":
            events.append(Event("rewrite", "failure", bundle.degraded))
        timings["rewrite"] = (time.perf_counter() - t0) * 1000

        plan = plan or self.route(query, cfg)
        t1 = time.perf_counter()
        jobs: dict[str, tuple[Callable[[], list[ScoredChunk]], float]] = {}
        if plan.use_graph and self.graph is not None:
            jobs["graph"] = (lambda: self.graph.retrieve(query, cfg.hops, cfg.graph_k), plan.graph_timeout_ms / 1000)
        if plan.use_hybrid:
            jobs["hybrid"] = (lambda: self.hybrid.retrieve(bundle, cfg.hybrid_k), plan.hybrid_timeout_ms / 1000)

        results: dict[str, list[ScoredChunk]] = {}
        pool = ThreadPoolExecutor(max_workers=max(1, len(jobs)))
        try:
            futures: dict[str, Future] = {name: pool.submit(fn) for name, (fn, _) in jobs.items()}
            # earliest deadline first; each wait is bounded by its own deadline
            for name in sorted(jobs, key=lambda n: jobs[n][1]):
                remaining = t1 + jobs[name][1] - time.perf_counter()
                try:
                    results[name] = list(futures[name].result(timeout=max(0.0, remaining)))
                    timings[name] = (time.perf_counter() - t1) * 1000
                except FutureTimeout:
                    events.append(Event(name, "timeout", f"> {int(jobs[name][1] * 1000)} ms"))
                    log.warning("%s channel missed its deadline", name)
                    results[name] = []
                    timings[name] = jobs[name][1] * 1000
                except Exception as exc:
                    events.append(Event(name, "failure", str(exc)))
                    log.warning("%s channel failed: %s", name, exc)
                    results[name] = []
                    timings[name] = (time.perf_counter() - t1) * 1000
        finally:
            pool.shutdown(wait=False, cancel_futures=True)
        timings["retrieval"] = (time.perf_counter() - t1) * 1000

        t2 = time.perf_counter()
        merged = merge_dedup(results)
        timings["merge"] = (time.perf_counter() - t2) * 1000

        t3 = time.perf_counter()
        ordered = rerank(query, merged, self.reranker, self.text_of, cfg.final_k, cfg.rerank_timeout_ms, events)
        timings["rerank"] = (time.perf_counter() - t3) * 1000

        t4 = time.perf_counter()
        evidence = truncate_to_budget(ordered, cfg.budget_tokens, self.text_of, self.token_counter)
        events.extend(evidence.events)
        evidence.events = events
        timings["truncate"] = (time.perf_counter() - t4) * 1000
        timings["total"] = (time.perf_counter() - t0) * 1000
        return RetrievalResult(evidence, plan, bundle, results, merged, timings, events)
