"""Shared fixtures: a synthetic corpus loaded into a store and wired to a pipeline."""

from coadapt.corpus import CorpusStore
from coadapt.evaluation import synth_corpus
from coadapt.pipeline import QAPipeline, build_indexes
from coadapt.reward import StaticStatusChecker


def synth_store(seed=0, size=40, hop_fraction=0.5):
    synth = synth_corpus(seed, size, hop_fraction)
    store = CorpusStore()
    store.ingest_chunks(synth.chunks)
    store.replay_citations(synth.citations)
    return synth, store


def synth_pipeline(generator, seed=0, size=40, hop_fraction=0.5, **kw):
    synth, store = synth_store(seed, size, hop_fraction)
    indexes = build_indexes(store, percent=synth.percent)
    checker = StaticStatusChecker(synth.http_status, default=None)
    return synth, QAPipeline(store, indexes, generator, synth.prefix_pool, checker, **kw)
