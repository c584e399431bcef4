import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from coadapt.corpus import CorpusStore, HighCitationSnapshot
from coadapt.graph import GazetteerExtractor, GraphIndex, build_graph
from coadapt.hybrid import HybridChannel, QueryBundle
from coadapt.orchestrator import (
    Candidate,
    ChannelPlan,
    Orchestrator,
    OrchestratorConfig,
    merge_dedup,
    rerank,
    truncate_to_budget,
)
from coadapt.ranking import ScoredChunk
from coadapt.stubs import IdentityReranker, OverlapReranker, SleepyReranker, SleepyRewriter
from coadapt.text import tokenize


class StubGraph:
    def __init__(self, hits, seeds=("x",), delay=0.0):
        self.hits, self._seeds, self.delay = hits, list(seeds), delay

    def seeds(self, query):
        return self._seeds

    def retrieve(self, query, hops, k):
        time.sleep(self.delay)
        return [ScoredChunk(c, 1.0 / (i + 1), "graph") for i, c in enumerate(self.hits)][:k]


class StubHybrid:
    def __init__(self, hits, delay=0.0):
        self.hits, self.delay = hits, delay

    def retrieve(self, bundle, k=None):
        time.sleep(self.delay)
        return [ScoredChunk(c, 1.0 / (i + 1), "hybrid") for i, c in enumerate(self.hits)][: k or 10]


TEXTS = {"a": "alpha one", "b": "beta two words", "c": "gamma", "d": "delta delta"}


def _orch(graph, hybrid, **kw):
    return Orchestrator(hybrid, graph, text_lookup=TEXTS.__getitem__, **kw)


def _cand(cid, score=1.0, channels=("hybrid",)):
    return Candidate(cid, score, channels, None)


# --- routing ---------------------------------------------------------------------


def test_one_word_query_without_entity_is_hybrid_only():
    plan = _orch(StubGraph([], seeds=()), StubHybrid([])).route("refunds")
    assert (plan.use_graph, plan.use_hybrid) == (False, True)


def test_entity_query_uses_both():
    plan = _orch(StubGraph([], seeds=("acme",)), StubHybrid([])).route("acme and globex refunds")
    assert plan.use_graph and plan.use_hybrid


def test_long_query_uses_both_even_without_entities():
    plan = _orch(StubGraph([], seeds=()), StubHybrid([])).route("refund window billing cycle payout")
    assert plan.use_graph


def test_force_both():
    plan = _orch(StubGraph([], seeds=()), StubHybrid([])).route("refunds", OrchestratorConfig(force_both=True))
    assert plan.use_graph


def test_plan_needs_a_channel():
    with pytest.raises(ValueError):
        ChannelPlan(False, False)


def test_empty_query_rejected():
    with pytest.raises(ValueError):
        _orch(StubGraph([]), StubHybrid([])).route(" ")


# --- retrieve --------------------------------------------------------------------


def test_slow_graph_equals_hybrid_only():
    cfg = OrchestratorConfig(graph_timeout_ms=50, force_both=True)
    slow = _orch(StubGraph(["a", "c"], delay=0.3), StubHybrid(["b", "d"]), config=cfg).retrieve("q")
    alone = _orch(None, StubHybrid(["b", "d"]), config=cfg).retrieve("q")
    assert slow.evidence.ids == alone.evidence.ids
    assert any(e.stage == "graph" and e.kind == "timeout" for e in slow.events)


def test_failed_channel_degrades():
    class Broken(StubGraph):
        def retrieve(self, *a):
            raise RuntimeError("graph down")

    res = _orch(Broken([]), StubHybrid(["a"]), config=OrchestratorConfig(force_both=True)).retrieve("q")
    assert res.evidence.ids == ["a"]
    assert res.events[0].kind == "failure"


def test_same_single_chunk_deduplicated():
    res = _orch(StubGraph(["a"]), StubHybrid(["a"]), config=OrchestratorConfig(force_both=True)).retrieve("q")
    assert res.evidence.ids == ["a"]
    assert res.evidence.provenance == {"a": ("graph", "hybrid")}


def test_all_channels_empty_is_not_an_error():
    res = _orch(StubGraph([]), StubHybrid([])).retrieve("q")
    assert len(res.evidence) == 0


def test_deterministic():
    orch = _orch(StubGraph(["a", "c"]), StubHybrid(["b", "a", "d"]), config=OrchestratorConfig(force_both=True))
    assert orch.retrieve("q").evidence.items == orch.retrieve("q").evidence.items


def test_channels_run_concurrently():
    cfg = OrchestratorConfig(graph_timeout_ms=1000, hybrid_timeout_ms=1000, force_both=True)
    orch = _orch(StubGraph(["a"], delay=0.2), StubHybrid(["b"], delay=0.2), config=cfg)
    t = time.perf_counter()
    orch.retrieve("q")
    assert time.perf_counter() - t < 0.35


def test_rewrite_timeout_degrades_to_original():
    cfg = OrchestratorConfig(rewrite_timeout_ms=30)
    res = _orch(None, StubHybrid(["a"]), rewriter=SleepyRewriter(0.3), config=cfg).retrieve("q")
    assert res.bundle.queries == ["q"]
    assert any(e.stage == "rewrite" and e.kind == "timeout" for e in res.events)


def test_planted_two_hop_fact_needs_graph():
    texts = {
        "bridge": "Orvane delegates refund decisions to Tellus.",
        "gold": "Tellus sets a limit of 30 units.",
        "noise": "Refund decisions are logged weekly.",
    }
    store = CorpusStore()
    store.ingest_chunks([{"id": k, "text": v} for k, v in texts.items()])
    snap = HighCitationSnapshot(tuple(sorted(texts)), 100, 0.0)
    graph = GraphIndex(build_graph(snap, store, GazetteerExtractor(["orvane", "tellus"])))
    hybrid = HybridChannel(store.chunks())
    query = "what refund applies to Orvane?"
    assert "gold" not in {s.chunk_id for s in hybrid.retrieve(QueryBundle(query))}
    orch = Orchestrator(hybrid, graph, text_lookup=lambda c: store.get(c).text)
    assert "gold" in orch.retrieve(query).evidence.ids


# --- merge ------------------------------------------------------------------------


def test_merge_disjoint_lists_rrf():
    merged = merge_dedup({"graph": [ScoredChunk("a", 1, "graph")], "hybrid": [ScoredChunk("b", 1, "hybrid"), ScoredChunk("c", 1, "hybrid")]})
    assert [(m.chunk_id, m.score) for m in merged] == [("a", pytest.approx(1 / 61)), ("b", pytest.approx(1 / 61)), ("c", pytest.approx(1 / 62))]


def test_merge_identical_lists_tag_both():
    lst = [ScoredChunk(c, 1, "x") for c in "abc"]
    merged = merge_dedup({"graph": lst, "hybrid": lst})
    assert [m.chunk_id for m in merged] == ["a", "b", "c"]
    assert all(m.channels == ("graph", "hybrid") for m in merged)


def test_merge_empty():
    assert merge_dedup({}) == [] and merge_dedup({"graph": [], "hybrid": []}) == []


def test_merge_dedups_external_text_by_hash():
    ext = [ScoredChunk("", 1, "graph", text="same body"), ScoredChunk("", 1, "graph", text="same body")]
    assert len(merge_dedup({"graph": ext})) == 1


@given(st.lists(st.sampled_from("abcdef"), max_size=6), st.lists(st.sampled_from("abcdef"), max_size=6))
def test_merge_no_duplicates(g, h):
    merged = merge_dedup({"graph": [ScoredChunk(c, 1, "graph") for c in g], "hybrid": [ScoredChunk(c, 1, "hybrid") for c in h]})
    ids = [m.chunk_id for m in merged]
    assert len(ids) == len(set(ids)) and set(ids) == set(g) | set(h)


# --- rerank ----------------------------------------------------------------------


def test_identity_reranker_keeps_order():
    cands = [_cand(c) for c in "dcba"]
    assert rerank("q", cands, IdentityReranker(), lambda c: TEXTS[c.chunk_id]) == cands


@given(st.permutations(list(TEXTS)), st.sampled_from(["alpha beta", "delta two", "gamma words one", "none"]))
def test_overlap_reranker_matches_oracle(order, query):
    cands = [_cand(c) for c in order]
    out = rerank(query, cands, OverlapReranker(), lambda c: TEXTS[c.chunk_id])
    q = set(tokenize(query))
    overlap = {c: len(q & set(tokenize(t))) for c, t in TEXTS.items()}
    assert [c.chunk_id for c in out] == sorted(order, key=lambda c: -overlap[c])


def test_rerank_timeout_keeps_order_and_logs():
    events = []
    cands = [_cand(c) for c in "dcba"]
    out = rerank("alpha", cands, SleepyReranker(0.3), lambda c: TEXTS[c.chunk_id], timeout_ms=20, events=events)
    assert out == cands
    assert events[0].kind == "timeout"


def test_rerank_wrong_length_is_failure():
    class Short:
        def score(self, q, p):
            return [1.0]

    events = []
    cands = [_cand(c) for c in "ab"]
    assert rerank("q", cands, Short(), lambda c: "", events=events) == cands
    assert events[0].kind == "failure"


# --- truncate --------------------------------------------------------------------


def _sized(n):
    return lambda c: " ".join(["w"] * n[c.chunk_id])


def test_truncate_under_budget_unchanged():
    ev = truncate_to_budget([_cand("a"), _cand("b")], 8192, _sized({"a": 10, "b": 20}))
    assert ev.ids == ["a", "b"] and ev.token_count == 30


def test_truncate_keeps_whole_first_chunk():
    ev = truncate_to_budget([_cand("a"), _cand("b")], 8192, _sized({"a": 5000, "b": 4000}))
    assert ev.ids == ["a"] and ev.token_count == 5000


def test_truncate_zero_budget():
    assert truncate_to_budget([_cand("a")], 0, _sized({"a": 1})).items == []


def test_truncate_oversized_first_chunk_event():
    ev = truncate_to_budget([_cand("a")], 10, _sized({"a": 11}))
    assert ev.items == [] and ev.events[0].kind == "oversized_first_chunk"


def test_truncate_rejects_negative_budget():
    with pytest.raises(ValueError):
        truncate_to_budget([], -1, _sized({}))


@given(st.lists(st.integers(0, 50), max_size=10), st.integers(0, 200))
def test_truncate_longest_prefix(sizes, budget):
    names = {f"c{i}": s for i, s in enumerate(sizes)}
    ev = truncate_to_budget([_cand(c) for c in names], budget, _sized(names))
    assert ev.token_count <= budget
    n = len(ev.items)
    assert ev.ids == list(names)[:n]
    if n < len(sizes):
        assert ev.token_count + sizes[n] > budget
