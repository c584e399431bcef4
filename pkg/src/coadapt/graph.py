"""Entity graph over the high-citation subset, with communities and local search."""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Protocol, Sequence

from .corpus import CorpusStore, HighCitationSnapshot, KnowledgeChunk, rank_key
from .ranking import ScoredChunk, top_k
from .text import STOPWORDS, content_terms

log = logging.getLogger(__name__)

DEFAULT_HOPS = 2
DEFAULT_K = 10
COMMUNITY_BONUS = 0.25
SUMMARY_CHUNKS = 3
SUMMARY_CHARS = 256
MAX_LP_ROUNDS = 100


class ExtractorFailure(Exception):
    def __init__(self, chunk_id: str, message: str):
        super().__init__(f"{chunk_id}: {message}")
        self.chunk_id = chunk_id


@dataclass(frozen=True)
class Entity:
    name: str
    chunk_ids: frozenset[str]


@dataclass(frozen=True, order=True)
class Relation:
    src: str
    dst: str
    evidence_chunk: str
    label: str = "co-occurs"


@dataclass(frozen=True)
class Extraction:
    entities: tuple[str, ...]
    relations: tuple[Relation, ...]


class Extractor(Protocol):
    def extract(self, chunk: KnowledgeChunk) -> Extraction: ...


# --- default extractor -----------------------------------------------------

_CAPITALIZED_RE = re.compile(r"\b[A-Z][A-Za-z0-9\-]*(?:[ \t]+[A-Z][A-Za-z0-9\-]*)*")
_QUOTED_RE = re.compile(r'"([^"\n]{2,60})"')


def _trim_stopwords(words: list[str]) -> list[str]:
    while words and words[0].lower() in STOPWORDS:
        words = words[1:]
    while words and words[-1].lower() in STOPWORDS:
        words = words[:-1]
    return words


def build_gazetteer(chunks: Iterable[KnowledgeChunk], extra_terms: Iterable[str] = ()) -> list[str]:
    """Dictionary of entity terms: capitalized phrases, quoted terms, plus ``extra_terms``.

    A single capitalized word that also occurs in lower case somewhere in the
    corpus is taken to be a sentence-initial common word and skipped.
    """
    chunks = list(chunks)
    lower_words: set[str] = set()
    for c in chunks:
        lower_words.update(w for w in re.findall(r"\b[a-z][a-z0-9\-]*", c.text))
    terms: set[str] = set()
    for c in chunks:
        for m in _CAPITALIZED_RE.finditer(c.text):
            words = _trim_stopwords(m.group(0).split())
            if not words:
                continue
            if len(words) == 1 and (words[0].lower() in lower_words or len(words[0]) < 2):
                continue
            terms.add(" ".join(words).lower())
        for m in _QUOTED_RE.finditer(c.text):
            term = " ".join(m.group(1).split()).lower()
            if term and term not in STOPWORDS:
                terms.add(term)
    terms.update(" ".join(t.split()).lower() for t in extra_terms if t.strip())
    return sorted(terms)


def term_matcher(terms: Iterable[str]) -> Optional[re.Pattern]:
    # longest first so that multi-word terms win over their parts
    ordered = sorted(set(terms), key=lambda t: (-len(t), t))
    if not ordered:
        return None
    alternation = "|".join(r"\s+".join(map(re.escape, t.split())) for t in ordered)
    return re.compile(rf"(?<!\w)(?:{alternation})(?!\w)", re.IGNORECASE)


def match_terms(pattern: Optional[re.Pattern], text: str) -> list[str]:
    if pattern is None:
        return []
    return sorted({" ".join(m.group(0).split()).lower() for m in pattern.finditer(text)})


class GazetteerExtractor:
    """Entities are dictionary hits; every co-occurring pair in a chunk is a relation."""

    def __init__(self, terms: Iterable[str]):
        self.terms = sorted(set(terms))
        self._pattern = term_matcher(self.terms)
        self.fingerprint = hashlib.sha256("\n".join(self.terms).encode("utf-8")).hexdigest()

    @classmethod
    def from_chunks(cls, chunks: Iterable[KnowledgeChunk], extra_terms: Iterable[str] = ()) -> "GazetteerExtractor":
        return cls(build_gazetteer(chunks, extra_terms))

    def extract(self, chunk: KnowledgeChunk) -> Extraction:
        names = match_terms(self._pattern, chunk.text)
        relations = tuple(
            Relation(a, b, chunk.id) for i, a in enumerate(names) for b in names[i + 1 :]
        )
        return Extraction(tuple(names), relations)


# --- graph -----------------------------------------------------------------


def _text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChunkContribution:
    text_hash: str
    extraction: Extraction


@dataclass
class KnowledgeGraph:
    snapshot_ids: tuple[str, ...] = ()
    entities: dict[str, Entity] = field(default_factory=dict)
    relations: tuple[Relation, ...] = ()
    contributions: dict[str, ChunkContribution] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    extractor_key: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "snapshot": sorted(self.snapshot_ids),
            "entities": {n: sorted(e.chunk_ids) for n, e in sorted(self.entities.items())},
            "relations": [[r.src, r.dst, r.evidence_chunk, r.label] for r in self.relations],
            "failures": dict(sorted(self.failures.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def adjacency(self) -> dict[str, Counter]:
        adj: dict[str, Counter] = {n: Counter() for n in self.entities}
        for r in self.relations:
            adj[r.src][r.dst] += 1
            adj[r.dst][r.src] += 1
        return adj

    def components(self) -> list[set[str]]:
        adj = self.adjacency()
        seen: set[str] = set()
        out = []
        for start in sorted(adj):
            if start in seen:
                continue
            comp = {start}
            queue = deque([start])
            while queue:
                node = queue.popleft()
                for nb in adj[node]:
                    if nb not in comp:
                        comp.add(nb)
                        queue.append(nb)
            seen |= comp
            out.append(comp)
        return out


def _extract_one(chunk: KnowledgeChunk, extractor: Extractor) -> Extraction:
    result = extractor.extract(chunk)
    names = tuple(sorted({n for n in result.entities if n}))
    keep = set(names)
    relations = []
    for r in result.relations:
        if r.src == r.dst or r.src not in keep or r.dst not in keep:
            continue
        src, dst = sorted((r.src, r.dst))
        relations.append(Relation(src, dst, chunk.id, r.label))
    return Extraction(names, tuple(sorted(set(relations))))


def _assemble(
    snapshot_ids: Sequence[str],
    contributions: Mapping[str, ChunkContribution],
    failures: Mapping[str, str],
    extractor_key: Optional[str] = None,
) -> KnowledgeGraph:
    mentions: dict[str, set[str]] = {}
    relations: set[Relation] = set()
    for cid, contrib in contributions.items():
        for name in contrib.extraction.entities:
            mentions.setdefault(name, set()).add(cid)
        relations.update(contrib.extraction.relations)
    entities = {n: Entity(n, frozenset(ids)) for n, ids in sorted(mentions.items())}
    return KnowledgeGraph(tuple(snapshot_ids), entities, tuple(sorted(relations)), dict(contributions), dict(failures), extractor_key)


def _contribute(chunk: KnowledgeChunk, extractor: Extractor, failures: dict[str, str]) -> Optional[ChunkContribution]:
    try:
        return ChunkContribution(_text_hash(chunk.text), _extract_one(chunk, extractor))
    except Exception as exc:
        log.warning("extractor failed on chunk %s: %s", chunk.id, exc)
        failures[chunk.id] = str(exc)
        return None


def build_graph(snapshot: HighCitationSnapshot, store: CorpusStore, extractor: Extractor) -> KnowledgeGraph:
    """Extract every snapshot chunk; chunks whose extraction raises are skipped and listed in ``failures``."""
    contributions: dict[str, ChunkContribution] = {}
    failures: dict[str, str] = {}
    for cid in snapshot.chunk_ids:
        contrib = _contribute(store.get(cid), extractor, failures)
        if contrib is not None:
            contributions[cid] = contrib
    return _assemble(snapshot.chunk_ids, contributions, failures, getattr(extractor, "fingerprint", None))


def incremental_update(
    graph: KnowledgeGraph, snapshot: HighCitationSnapshot, store: CorpusStore, extractor: Extractor
) -> KnowledgeGraph:
    """Re-extract only chunks that joined the snapshot or whose text changed.

    A different extractor (by ``fingerprint``) invalidates every cached
    contribution, so the result always equals a full rebuild.
    """
    key = getattr(extractor, "fingerprint", None)
    if key != graph.extractor_key:
        return build_graph(snapshot, store, extractor)
    contributions: dict[str, ChunkContribution] = {}
    failures: dict[str, str] = {}
    recomputed = 0
    for cid in snapshot.chunk_ids:
        chunk = store.get(cid)
        prev = graph.contributions.get(cid)
        if prev is not None and prev.text_hash == _text_hash(chunk.text):
            contributions[cid] = prev
            continue
        recomputed += 1
        contrib = _contribute(chunk, extractor, failures)
        if contrib is not None:
            contributions[cid] = contrib
    log.debug("incremental update re-extracted %d of %d chunks", recomputed, len(snapshot.chunk_ids))
    return _assemble(snapshot.chunk_ids, contributions, failures, key)


# --- communities -------------------------------------------------------------


def label_propagation(adj: Mapping[str, Mapping[str, float]], seed: int = 0, max_rounds: int = MAX_LP_ROUNDS) -> dict[str, str]:
    """Synchronous label propagation; each node also counts its own label once.

    Ties go to the label ranked first in a seeded permutation of the node
    ids, which makes the result a pure function of (graph, seed).
    """
    nodes = sorted(adj)
    order = nodes[:]
    random.Random(seed).shuffle(order)
    rank = {n: i for i, n in enumerate(order)}
    labels = {n: n for n in nodes}
    for _ in range(max_rounds):
        new = {}
        for n in nodes:
            weights: Counter = Counter({labels[n]: 1.0})
            for nb, w in adj[n].items():
                weights[labels[nb]] += w
            best = max(weights.values())
            new[n] = min((lab for lab, w in weights.items() if w == best), key=rank.__getitem__)
        if new == labels:
            break
        labels = new
    return labels


def _name_groups(labels: Mapping[str, str], prefix: str) -> dict[str, str]:
    groups: dict[str, list[str]] = {}
    for node, lab in labels.items():
        groups.setdefault(lab, []).append(node)
    ordered = sorted(groups.values(), key=min)
    return {node: f"{prefix}{i}" for i, members in enumerate(ordered) for node in members}


def first_sentence(text: str) -> str:
    m = re.search(r"[.!?](?:\s|$)", text)
    return (text[: m.start() + 1] if m else text).strip()


@dataclass
class CommunityHierarchy:
    levels: list[dict[str, str]] = field(default_factory=list)
    summaries: dict[str, str] = field(default_factory=dict)

    def members(self, level: int) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for entity, cid in sorted(self.levels[level].items()):
            out.setdefault(cid, []).append(entity)
        return out

    def to_dict(self) -> dict:
        return {"levels": [dict(sorted(l.items())) for l in self.levels], "summaries": dict(sorted(self.summaries.items()))}


def detect_communities(
    graph: KnowledgeGraph,
    seed: int = 0,
    store: Optional[CorpusStore] = None,
    heat: Optional[Mapping[str, int]] = None,
) -> CommunityHierarchy:
    """Two-level hierarchy: label propagation on entities, then on contracted communities."""
    adj = graph.adjacency()
    level0 = _name_groups(label_propagation(adj, seed), "L0-C")

    super_adj: dict[str, Counter] = {c: Counter() for c in set(level0.values())}
    for node, nbrs in adj.items():
        for nb, w in nbrs.items():
            a, b = level0[node], level0[nb]
            if a != b:
                super_adj[a][b] += w
    super_labels = _name_groups(label_propagation(super_adj, seed), "L1-C")
    level1 = {entity: super_labels[c] for entity, c in level0.items()}

    hierarchy = CommunityHierarchy([level0, level1], {})
    if store is not None:
        hierarchy.summaries = summarize(hierarchy, graph, store, heat)
    return hierarchy


def summarize(
    hierarchy: CommunityHierarchy,
    graph: KnowledgeGraph,
    store: CorpusStore,
    heat: Optional[Mapping[str, int]] = None,
) -> dict[str, str]:
    """First sentences of each community's three hottest chunks, cut to 256 chars."""
    heat = heat if heat is not None else store.heat_counts()
    summaries = {}
    for level in range(len(hierarchy.levels)):
        for cid, members in hierarchy.members(level).items():
            chunk_ids = set().union(*(graph.entities[m].chunk_ids for m in members))
            chunks = sorted((store.get(c) for c in chunk_ids if c in store), key=lambda c: rank_key(c, heat.get(c.id, 0)))
            text = " ".join(first_sentence(c.text) for c in chunks[:SUMMARY_CHUNKS])
            summaries[cid] = text[:SUMMARY_CHARS]
    return summaries


# --- retrieval -----------------------------------------------------------------


class GraphIndex:
    """Immutable retrieval view: graph, communities and an entity matcher."""

    def __init__(self, graph: KnowledgeGraph, hierarchy: Optional[CommunityHierarchy] = None):
        self.graph = graph
        self.hierarchy = hierarchy or CommunityHierarchy([{}, {}], {})
        self._adj = graph.adjacency()
        self._matcher = term_matcher(graph.entities)

    def seeds(self, query: str) -> list[str]:
        return [n for n in match_terms(self._matcher, query) if n in self.graph.entities]

    def distances(self, query: str, hops: int) -> dict[str, int]:
        dist = {s: 0 for s in self.seeds(query)}
        queue = deque(sorted(dist))
        while queue:
            node = queue.popleft()
            if dist[node] == hops:
                continue
            for nb in sorted(self._adj[node]):
                if nb not in dist:
                    dist[nb] = dist[node] + 1
                    queue.append(nb)
        return dist

    def scores(self, query: str, hops: int = DEFAULT_HOPS) -> dict[str, float]:
        """Untruncated chunk scores: sum of 1/(1+hop) over attaching visited entities, plus the community bonus."""
        if hops < 1:
            raise ValueError("hops must be >= 1")
        dist = self.distances(query, hops)
        scores: dict[str, float] = {}
        communities: dict[str, set[str]] = {}
        level0 = self.hierarchy.levels[0] if self.hierarchy.levels else {}
        for name, d in dist.items():
            for cid in self.graph.entities[name].chunk_ids:
                scores[cid] = scores.get(cid, 0.0) + 1.0 / (1 + d)
                if name in level0:
                    communities.setdefault(cid, set()).add(level0[name])
        if scores and self.hierarchy.summaries:
            q_terms = content_terms(query)
            for cid, comms in communities.items():
                if any(q_terms & content_terms(self.hierarchy.summaries.get(c, "")) for c in comms):
                    scores[cid] += COMMUNITY_BONUS
        return scores

    def retrieve(self, query: str, hops: int = DEFAULT_HOPS, k: int = DEFAULT_K) -> list[ScoredChunk]:
        if k < 1:
            raise ValueError("k must be >= 1")
        return top_k((ScoredChunk(cid, s, "graph") for cid, s in self.scores(query, hops).items()), k)


def graph_retrieve(query: str, index: GraphIndex, hops: int = DEFAULT_HOPS, limit: int = DEFAULT_K) -> list[ScoredChunk]:
    return index.retrieve(query, hops, limit)
