"""Retrieve, generate, guard: the streaming QA pipeline behind the service."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Sequence

from .corpus import CorpusStore, HighCitationSnapshot
from .graph import CommunityHierarchy, GazetteerExtractor, GraphIndex, KnowledgeGraph, build_graph, detect_communities
from .guardrail import MAX_URL_LENGTH, Guardrail, GuardrailEvent, evidence_validator
from .hybrid import Embedder, HybridChannel, Rewriter
from .orchestrator import Orchestrator, OrchestratorConfig, Reranker, RetrievalResult
from .reward import StatusChecker

log = logging.getLogger(__name__)

REFUSAL = (
    "I could not find supporting material for this question in the knowledge base, "
    "so I cannot give a reliable answer. Please contact a support specialist."
)
STAGES = ("rewrite", "retrieval", "merge", "rerank", "truncate", "generation", "guardrail")


class GeneratorUnavailable(RuntimeError):
    def __init__(self, message: str, response: "QAResponse"):
        super().__init__(message)
        self.response = response


@dataclass
class QAResponse:
    answer: str = ""
    evidence_ids: list[str] = field(default_factory=list)
    guardrail_events: list[GuardrailEvent] = field(default_factory=list)
    timings_ms: dict[str, float] = field(default_factory=dict)
    channel_ms: dict[str, float] = field(default_factory=dict)
    retrieval_events: list[dict] = field(default_factory=list)
    refused: bool = False
    error: Optional[str] = None

    def metadata(self) -> dict:
        return {
            "evidence_ids": self.evidence_ids,
            "guardrail_events": [e.as_dict() for e in self.guardrail_events],
            "timings_ms": self.timings_ms,
            "channel_ms": self.channel_ms,
            "retrieval_events": self.retrieval_events,
            "refused": self.refused,
            "error": self.error,
        }


class Generator:
    def generate(self, query: str, history: Sequence[str], evidence: Sequence[str]) -> Iterator[str]: ...


@dataclass
class Indexes:
    snapshot: HighCitationSnapshot
    graph: KnowledgeGraph
    hierarchy: CommunityHierarchy
    graph_index: GraphIndex
    hybrid: HybridChannel


def build_indexes(
    store: CorpusStore,
    percent: Optional[int] = None,
    embedder: Optional[Embedder] = None,
    extra_terms: Sequence[str] = (),
    seed: int = 0,
    hybrid_k: int = 10,
) -> Indexes:
    """Graph over the active (or freshly selected) high-citation snapshot, hybrid index over everything."""
    if percent is not None:
        snapshot = store.select_high_citation(percent)
    else:
        snapshot = store.active_snapshot or store.select_high_citation(100)
    chunks = store.chunks()
    extractor = GazetteerExtractor.from_chunks(chunks, extra_terms)
    graph = build_graph(snapshot, store, extractor)
    hierarchy = detect_communities(graph, seed, store)
    return Indexes(snapshot, graph, hierarchy, GraphIndex(graph, hierarchy), HybridChannel(chunks, embedder, hybrid_k))


class _Clock:
    """Lap timer: each lap charges the time since the previous mark to one stage,
    so stages tile the request. Time suspended at a yield is excluded."""

    def __init__(self):
        self.stages: dict[str, float] = {}
        self.busy = 0.0
        self._mark = time.perf_counter()

    def add(self, stage: str, ms: float) -> None:
        self.stages[stage] = self.stages.get(stage, 0.0) + ms

    def lap(self, stage: str) -> None:
        now = time.perf_counter()
        self.add(stage, (now - self._mark) * 1000)
        self.busy += now - self._mark
        self._mark = now

    def split_lap(self, parts: Mapping[str, float], rest: str) -> None:
        """Charge known sub-stage times, and the remainder of the lap to ``rest``."""
        now = time.perf_counter()
        elapsed = (now - self._mark) * 1000
        for stage, ms in parts.items():
            self.add(stage, ms)
        self.add(rest, max(0.0, elapsed - sum(parts.values())))
        self.busy += now - self._mark
        self._mark = now

    def pause(self) -> None:
        self.busy += time.perf_counter() - self._mark

    def resume(self) -> None:
        self._mark = time.perf_counter()

    def total_ms(self) -> float:
        return (self.busy + time.perf_counter() - self._mark) * 1000


class QAPipeline:
    def __init__(
        self,
        store: CorpusStore,
        indexes: Indexes,
        generator: Generator,
        prefix_pool: Sequence[str] = (),
        checker: Optional[StatusChecker] = None,
        rewriter: Optional[Rewriter] = None,
        reranker: Optional[Reranker] = None,
        config: Optional[OrchestratorConfig] = None,
        blocklist: Sequence[str] = (),
        refusal: str = REFUSAL,
        max_url_length: int = MAX_URL_LENGTH,
        log_citations: bool = False,
    ):
        self.store = store
        self.indexes = indexes
        self.generator = generator
        self.prefix_pool = list(prefix_pool)
        self.checker = checker
        self.blocklist = list(blocklist)
        self.refusal = refusal
        self.max_url_length = max_url_length
        self.log_citations = log_citations
        self.orchestrator = Orchestrator(
            indexes.hybrid,
            indexes.graph_index,
            text_lookup=lambda cid: store.get(cid).text,
            rewriter=rewriter,
            reranker=reranker,
            config=config or OrchestratorConfig(),
        )

    def retrieve(self, query: str, overrides: Optional[Mapping] = None) -> RetrievalResult:
        return self.orchestrator.retrieve(query, self._config(overrides))

    def _config(self, overrides: Optional[Mapping]) -> OrchestratorConfig:
        if not overrides:
            return self.orchestrator.config
        base = {k: getattr(self.orchestrator.config, k) for k in OrchestratorConfig.__dataclass_fields__}
        base.update(overrides)
        return OrchestratorConfig.from_mapping(base)

    def guardrail_for(self, evidence_texts: Sequence[str]) -> Guardrail:
        return Guardrail(evidence_validator(evidence_texts, self.prefix_pool, self.checker), self.blocklist, self.max_url_length)

    def stream(self, query: str, history: Sequence[str] = (), overrides: Optional[Mapping] = None) -> Iterator[tuple[str, object]]:
        """Yields ("delta", text) pieces, then ("done", QAResponse) or ("error", QAResponse)."""
        clock = _Clock()
        result = self.retrieve(query, overrides)
        # routing and the parallel channel wait are charged to retrieval
        clock.split_lap({stage: result.timings_ms.get(stage, 0.0) for stage in ("rewrite", "merge", "rerank", "truncate")}, "retrieval")
        evidence = result.evidence
        response = QAResponse(
            evidence_ids=evidence.ids,
            channel_ms={k: result.timings_ms[k] for k in ("graph", "hybrid") if k in result.timings_ms},
            retrieval_events=[e.as_dict() for e in result.events],
        )
        if self.log_citations:
            for cid in evidence.ids:
                self.store.record_citation(cid)
        clock.lap("retrieval")

        guard = self.guardrail_for(evidence.texts)
        state = guard.new_state()
        pieces: list[str] = []
        if not evidence.items:
            response.refused = True
            source: Iterator[str] = iter([self.refusal])
        else:
            source = iter(self.generator.generate(query, list(history), evidence.texts))
        clock.lap("guardrail")

        while True:
            try:
                chunk = next(source)
            except StopIteration:
                clock.lap("generation")
                break
            except Exception as exc:
                clock.lap("generation")
                log.warning("generator failed: %s", exc)
                response.error = "generator_unavailable"
                response.answer = "".join(pieces)
                response.guardrail_events = list(state.events)
                response.timings_ms = self._timings(clock)
                yield "error", response
                return
            clock.lap("generation")
            out, state = guard.scan_chunk(state, chunk)
            clock.lap("guardrail")
            if out:
                pieces.append(out)
                clock.pause()
                yield "delta", out
                clock.resume()

        tail = guard.finalize(state)
        if tail:
            pieces.append(tail)
        response.answer = "".join(pieces)
        response.guardrail_events = list(state.events)
        clock.lap("guardrail")
        if tail:
            clock.pause()
            yield "delta", tail
            clock.resume()
        response.timings_ms = self._timings(clock)
        yield "done", response

    @staticmethod
    def _timings(clock: _Clock) -> dict[str, float]:
        timings = {stage: clock.stages.get(stage, 0.0) for stage in STAGES}
        timings["total"] = clock.total_ms()
        return timings

    def answer(self, query: str, history: Sequence[str] = (), overrides: Optional[Mapping] = None) -> QAResponse:
        for kind, payload in self.stream(query, history, overrides):
            if kind == "error":
                raise GeneratorUnavailable("generator unavailable", payload)  # type: ignore[arg-type]
            if kind == "done":
                return payload  # type: ignore[return-value]
        raise RuntimeError("stream ended without a terminal event")
