import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coadapt.corpus import KnowledgeChunk
from coadapt.hybrid import (
    EmptyIndex,
    HashingEmbedder,
    HybridChannel,
    QueryBundle,
    build_dense_index,
    build_lexical_index,
    dense_retrieve,
    lexical_retrieve,
    rewrite_query,
)
from coadapt.ranking import ScoredChunk, fuse, rrf_scores
from coadapt.stubs import EchoRewriter, FailingClient, SleepyRewriter, TemplateRewriter
from oracles import bm25_oracle

DOCS = {
    "d1": "ad review policy applies to every new campaign",
    "d2": "billing cycle resets monthly",
    "d3": "review the policy before you submit an ad",
    "d4": "payout delay is five business days",
}


def _chunks(docs):
    return [KnowledgeChunk.create(cid, text) for cid, text in docs.items()]


def test_lexical_index_statistics():
    index = build_lexical_index(_chunks(DOCS))
    assert index.doc_count == 4
    assert index.avg_doc_len == pytest.approx((8 + 4 + 8 + 6) / 4)
    assert [cid for cid, _ in index.postings["review"]] == ["d1", "d3"]


def test_lexical_matches_oracle_on_example():
    hits = lexical_retrieve("ad review policy", build_lexical_index(_chunks(DOCS)), k=10)
    expected = bm25_oracle("ad review policy", DOCS)
    assert {h.chunk_id for h in hits} == set(expected) == {"d1", "d3"}
    for h in hits:
        assert h.score == pytest.approx(expected[h.chunk_id], rel=1e-9)


def test_lexical_no_match_and_empty_index():
    index = build_lexical_index(_chunks(DOCS))
    assert lexical_retrieve("zebra", index) == []
    with pytest.raises(EmptyIndex):
        lexical_retrieve("ad", build_lexical_index([]))
    with pytest.raises(ValueError):
        lexical_retrieve("ad", index, k=0)


words = st.sampled_from("alpha beta gamma delta eps zeta eta theta iota kappa".split())
corpora = st.dictionaries(
    st.from_regex(r"d[0-9]{1,3}", fullmatch=True),
    st.lists(words, min_size=1, max_size=12).map(" ".join),
    min_size=1,
    max_size=30,
)


@given(corpora, st.lists(words, min_size=1, max_size=4).map(" ".join))
def test_bm25_matches_oracle(docs, query):
    hits = lexical_retrieve(query, build_lexical_index(_chunks(docs)), k=len(docs))
    expected = bm25_oracle(query, docs)
    assert {h.chunk_id for h in hits} == set(expected)
    for h in hits:
        assert abs(h.score - expected[h.chunk_id]) <= 1e-9 * max(1.0, expected[h.chunk_id])
    scores = [h.score for h in hits]
    assert scores == sorted(scores, reverse=True)


def test_dense_identical_text_scores_one():
    embedder = HashingEmbedder()
    records = build_dense_index(_chunks(DOCS), embedder)
    top = dense_retrieve(DOCS["d2"], embedder, records, k=1)[0]
    assert top.chunk_id == "d2"
    assert top.score == pytest.approx(1.0)


@given(corpora, st.lists(words, min_size=1, max_size=4).map(" ".join))
def test_dense_matches_cosine_oracle(docs, query):
    embedder = HashingEmbedder(dim=64)
    records = build_dense_index(_chunks(docs), embedder)
    q = embedder.embed(query)
    expected = {}
    for cid, text in docs.items():
        v = embedder.embed(text)
        cos = float(np.dot(q, v) / (np.linalg.norm(q) * np.linalg.norm(v)))
        if cos > 0:
            expected[cid] = cos
    hits = dense_retrieve(query, embedder, records, k=len(docs))
    assert {h.chunk_id for h in hits} == set(expected)
    for h in hits:
        assert h.score == pytest.approx(min(1.0, expected[h.chunk_id]), abs=1e-9)


def test_dense_embedder_failure_yields_empty():
    embedder = HashingEmbedder()
    records = build_dense_index(_chunks(DOCS), embedder)
    assert dense_retrieve("ad", FailingClient(RuntimeError("down")), records) == []


def test_rrf_constants():
    a = [ScoredChunk("x", 5, "lexical"), ScoredChunk("y", 3, "lexical")]
    b = [ScoredChunk("x", 0.9, "dense")]
    scores = rrf_scores([a, b])
    assert scores["x"] == pytest.approx(2 / 61)
    assert scores["y"] == pytest.approx(1 / 62)
    assert rrf_scores([[ScoredChunk("z", 1, "dense")]])["z"] == pytest.approx(1 / 61)


ranked_lists = st.lists(st.lists(st.sampled_from("abcdefgh"), unique=True, max_size=8), min_size=1, max_size=4)


@given(ranked_lists)
def test_fusion_dominance(lists):
    """An item ranked at least as well as another in every list is fused at least as high."""
    scored = [[ScoredChunk(cid, 1.0, "lexical") for cid in lst] for lst in lists]
    scores = rrf_scores(scored)
    for x in scores:
        for y in scores:
            dominates = all(
                (x in lst and (y not in lst or lst.index(x) <= lst.index(y))) or (x not in lst and y not in lst)
                for lst in lists
            )
            if dominates:
                assert scores[x] >= scores[y] - 1e-15
    fused = fuse(*scored, k=100)
    assert [f.chunk_id for f in fused] == sorted(scores, key=lambda c: (-scores[c], c))


def test_rewrite_bundle_sizes():
    assert len(rewrite_query("ad policy", None)) == 1
    assert len(rewrite_query("ad policy", TemplateRewriter())) == 4
    assert len(rewrite_query("ad policy", EchoRewriter())) == 1


def test_rewrite_degrades_on_failure():
    class Broken:
        def rewrite(self, q):
            raise TimeoutError("slow")

    bundle = rewrite_query("ad policy", Broken())
    assert bundle.queries == ["ad policy"]
    assert "TimeoutError" in bundle.degraded


def test_rewrite_rejects_empty_query():
    with pytest.raises(ValueError):
        rewrite_query("  ", SleepyRewriter(0))


def test_hybrid_channel_covers_both_arms():
    channel = HybridChannel(_chunks(DOCS))
    fused = channel.retrieve(QueryBundle("ad review policy"))
    assert fused[0].chunk_id in {"d1", "d3"}
    assert {f.channel for f in fused} == {"hybrid"}
    lexical = {h.chunk_id for h in channel.search("ad review policy", "lexical")}
    assert lexical <= {f.chunk_id for f in fused}
    with pytest.raises(ValueError):
        channel.search("x", "sparse")


def test_hybrid_multi_query_is_deterministic():
    channel = HybridChannel(_chunks(DOCS))
    bundle = rewrite_query("review policy", TemplateRewriter())
    assert channel.retrieve(bundle) == channel.retrieve(bundle)
