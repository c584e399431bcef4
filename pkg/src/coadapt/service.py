"""Workspace: the state directory and every operation the HTTP API exposes.

A workspace is a directory holding the corpus journal (``store.jsonl``),
optional ``settings.json`` and build artifacts (``graph.json``,
``communities.json``, ``lexical.json``). Indexes live in memory and are
rebuilt from the journal on demand, so a restarted service answers the same.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

from .clients import HttpEmbedder, HttpReranker, HttpRewriter, OpenAIStyleGenerator
from .corpus import CorpusStore
from .graph import GazetteerExtractor, GraphIndex, KnowledgeGraph, build_graph, detect_communities, incremental_update
from .hybrid import HybridChannel
from .orchestrator import OrchestratorConfig
from .pipeline import Indexes, QAPipeline
from .reward import (
    HttpJudgeClient,
    HttpStatusChecker,
    RewardClients,
    RewardContext,
    StaticStatusChecker,
    compute_reward,
    load_prefix_pool,
)
from .stubs import GENERATORS, RuleJudge

log = logging.getLogger(__name__)

VERSION = "0.1.0"


@dataclass
class Settings:
    prefix_pool: list[str] = field(default_factory=list)
    prefix_pool_file: Optional[str] = None
    # offline: URL -> status table instead of live probes (unknown URLs are unreachable)
    offline: bool = True
    http_status: dict[str, Any] = field(default_factory=dict)
    generator: Union[str, dict] = "faithful-echo"
    judge_url: Optional[str] = None
    rewriter_url: Optional[str] = None
    reranker_url: Optional[str] = None
    embedder_url: Optional[str] = None
    blocklist: list[str] = field(default_factory=list)
    extra_terms: list[str] = field(default_factory=list)
    percent: int = 10
    graph_seed: int = 0
    orchestrator: dict[str, Any] = field(default_factory=dict)
    log_citations: bool = False

    @classmethod
    def from_mapping(cls, data: Mapping) -> "Settings":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown settings keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Settings":
        return cls.from_mapping(json.loads(Path(path).read_text(encoding="utf-8")))

    def pool(self) -> list[str]:
        pool = list(self.prefix_pool)
        if self.prefix_pool_file:
            pool += load_prefix_pool(self.prefix_pool_file)
        return pool

    def checker(self):
        return StaticStatusChecker(self.http_status, default=None) if self.offline else HttpStatusChecker()

    def make_generator(self):
        if isinstance(self.generator, dict):
            return OpenAIStyleGenerator(self.generator["url"], self.generator.get("model", "default"))
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator persona {self.generator!r}; choose from {sorted(GENERATORS)}")
        return GENERATORS[self.generator]()


class Workspace:
    def __init__(self, root: Union[str, Path], settings: Optional[Settings] = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        settings_file = self.root / "settings.json"
        if settings is None:
            settings = Settings.load(settings_file) if settings_file.exists() else Settings()
        self.settings = settings
        self.store = CorpusStore(self.root)
        self._lock = threading.RLock()
        self._graph: Optional[KnowledgeGraph] = None
        self._graph_index: Optional[GraphIndex] = None
        self._hybrid: Optional[HybridChannel] = None
        self._pipeline: Optional[QAPipeline] = None
        self.generator = settings.make_generator()

    # -- corpus ---------------------------------------------------------------

    def ingest(self, records: Sequence[Mapping]) -> dict:
        with self._lock:
            stats = self.store.ingest_chunks(records)
            self._hybrid = None
            self._graph_index = None
            self._pipeline = None
            return {"added": stats.added, "replaced": stats.replaced, "total": len(self.store)}

    def cite(self, entries: Sequence[Mapping]) -> dict:
        with self._lock:
            return {"recorded": self.store.replay_citations(entries)}

    def heat_report(self) -> list[dict]:
        return [asdict(h) for h in self.store.heat_report()]

    def snapshot(self, percent: int, now=None) -> dict:
        with self._lock:
            snap = self.store.rolling_update(percent, now)
            self._graph_index = None
            self._pipeline = None
            return {"chunk_ids": list(snap.chunk_ids), "percent": snap.percent, "created_at": snap.created_at}

    def _active_snapshot(self):
        return self.store.active_snapshot or self.store.select_high_citation(self.settings.percent)

    # -- graph ----------------------------------------------------------------

    def build_graph(self) -> dict:
        with self._lock:
            snap = self._active_snapshot()
            extractor = GazetteerExtractor.from_chunks(self.store.chunks(), self.settings.extra_terms)
            if self._graph is not None:
                graph = incremental_update(self._graph, snap, self.store, extractor)
            else:
                graph = build_graph(snap, self.store, extractor)
            hierarchy = detect_communities(graph, self.settings.graph_seed, self.store)
            self._graph = graph
            self._graph_index = GraphIndex(graph, hierarchy)
            self._pipeline = None
            (self.root / "graph.json").write_text(graph.to_json() + "\n", encoding="utf-8")
            (self.root / "communities.json").write_text(json.dumps(hierarchy.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
            return {
                "snapshot_size": len(snap.chunk_ids),
                "entities": len(graph.entities),
                "relations": len(graph.relations),
                "failures": graph.failures,
                "communities": {f"level{i}": len(set(level.values())) for i, level in enumerate(hierarchy.levels)},
            }

    @property
    def graph_index(self) -> GraphIndex:
        if self._graph_index is None:
            self.build_graph()
        return self._graph_index  # type: ignore[return-value]

    def communities(self) -> dict:
        h = self.graph_index.hierarchy
        return {
            "levels": [h.members(i) for i in range(len(h.levels))],
            "summaries": dict(sorted(h.summaries.items())),
        }

    def graph_query(self, query: str, hops: int = 2, k: int = 10) -> dict:
        index = self.graph_index
        return {
            "seeds": index.seeds(query),
            "results": [{"chunk_id": s.chunk_id, "score": s.score} for s in index.retrieve(query, hops, k)],
        }

    # -- hybrid index ---------------------------------------------------------

    def build_index(self) -> dict:
        with self._lock:
            embedder = HttpEmbedder(self.settings.embedder_url) if self.settings.embedder_url else None
            self._hybrid = HybridChannel(self.store.chunks(), embedder)
            self._pipeline = None
            (self.root / "lexical.json").write_text(self._hybrid.lexical.to_json() + "\n", encoding="utf-8")
            return {"documents": self._hybrid.lexical.doc_count, "dense_records": len(self._hybrid.dense)}

    @property
    def hybrid(self) -> HybridChannel:
        if self._hybrid is None:
            self.build_index()
        return self._hybrid  # type: ignore[return-value]

    def search(self, query: str, k: int = 10, channel: str = "hybrid") -> list[dict]:
        return [{"chunk_id": s.chunk_id, "score": s.score, "channel": s.channel} for s in self.hybrid.search(query, channel, k)]

    # -- pipeline -------------------------------------------------------------

    @property
    def pipeline(self) -> QAPipeline:
        with self._lock:
            if self._pipeline is None:
                s = self.settings
                graph_index = self.graph_index
                indexes = Indexes(self._active_snapshot(), graph_index.graph, graph_index.hierarchy, graph_index, self.hybrid)
                self._pipeline = QAPipeline(
                    self.store,
                    indexes,
                    self.generator,
                    prefix_pool=s.pool(),
                    checker=s.checker(),
                    rewriter=HttpRewriter(s.rewriter_url) if s.rewriter_url else None,
                    reranker=HttpReranker(s.reranker_url) if s.reranker_url else None,
                    config=OrchestratorConfig.from_mapping(s.orchestrator),
                    blocklist=s.blocklist,
                    log_citations=s.log_citations,
                )
            return self._pipeline

    def retrieve(self, query: str, explain: bool = False, overrides: Optional[Mapping] = None) -> dict:
        result = self.pipeline.retrieve(query, overrides)
        out: dict[str, Any] = {
            "evidence": [
                {"chunk_id": i.chunk_id, "score": i.score, "channels": list(i.channels), "tokens": i.tokens} for i in result.evidence.items
            ],
            "token_count": result.evidence.token_count,
            "timings_ms": result.timings_ms,
            "events": [e.as_dict() for e in result.events],
        }
        if explain:
            kept = set(result.evidence.ids)
            out["plan"] = {"graph": result.plan.use_graph, "hybrid": result.plan.use_hybrid}
            out["queries"] = result.bundle.queries
            out["channels"] = {
                name: [{"chunk_id": s.chunk_id, "score": s.score} for s in items] for name, items in result.channel_results.items()
            }
            out["dedup"] = [
                {
                    "chunk_id": c.chunk_id,
                    "rrf": c.score,
                    "channels": list(c.channels),
                    "merged": len(c.channels) > 1,
                    "kept": c.chunk_id in kept,
                }
                for c in result.merged
            ]
        return out

    def reward(self, answer: str, evidence: Sequence[str], ground_truth: str, query: str = "", offline: bool = True) -> dict:
        s = self.settings
        if offline or not s.judge_url:
            clients = RewardClients(RuleJudge(), StaticStatusChecker(s.http_status, default=None), s.pool())
        else:
            clients = RewardClients(HttpJudgeClient(s.judge_url), s.checker(), s.pool())
        return reward_report(answer, evidence, ground_truth, query, clients)

    def health(self) -> dict:
        snap = self.store.active_snapshot
        return {
            "status": "ok",
            "version": VERSION,
            "chunks": len(self.store),
            "active_snapshot": len(snap.chunk_ids) if snap else None,
            "generator": self.settings.generator if isinstance(self.settings.generator, str) else "http",
        }


def reward_report(answer: str, evidence: Sequence[str], ground_truth: str, query: str, clients: RewardClients) -> dict:
    report = compute_reward(answer, evidence, ground_truth, RewardContext(query), clients)
    return {
        **report.vector.as_dict(),
        "grade": report.judge.faithfulness_grade,
        "reason": report.judge.reason,
        "urls": [asdict(v) for v in report.verdicts],
    }

