"""Evaluation metrics and the synthetic multi-hop corpus generator."""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .corpus import top_count, write_jsonl
from .reward import StatusChecker, extract_urls, extract_urls_from, validate_urls
from .text import content_terms, tokenize


class EmptyCaseSet(ValueError):
    pass


@dataclass
class EvalCase:
    id: str
    query: str
    gold_answer: str
    gold_chunk_ids: list[str]
    hops: int = 1
    hallucinated: Optional[bool] = None

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, row: Mapping) -> "EvalCase":
        return cls(
            str(row["id"]),
            row["query"],
            row.get("gold_answer", ""),
            list(row.get("gold_chunk_ids", [])),
            int(row.get("hops", 1)),
            row.get("hallucinated"),
        )


# --- metrics -------------------------------------------------------------------


def hallucination_rate(verdicts: Iterable[Union[bool, EvalCase]]) -> float:
    """Fraction of cases flagged as hallucinated."""
    flags = [bool(v.hallucinated) if isinstance(v, EvalCase) else bool(v) for v in verdicts]
    if not flags:
        raise EmptyCaseSet("hallucination rate needs at least one case")
    return sum(flags) / len(flags)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """Word-level ROUGE-L F1 on a 0-100 scale (whitespace tokens, case kept)."""
    cand, ref = candidate.split(), reference.split()
    if not cand or not ref:
        return 0.0
    # F1 of P = lcs/|cand| and R = lcs/|ref| reduces to 2*lcs/(|cand|+|ref|);
    # one integer division keeps the result correctly rounded
    return 200 * lcs_length(cand, ref) / (len(cand) + len(ref))


def recall_metrics(retrieved: Sequence[Iterable[str]], gold: Sequence[Iterable[str]]) -> dict[str, float]:
    """Mean |retrieved ∩ gold| per query and micro-recall over gold chunks (percent)."""
    if len(retrieved) != len(gold):
        raise ValueError("retrieved and gold must be aligned per query")
    if not gold:
        return {"effective_chunks_per_query": 0.0, "recall_effectiveness": 0.0}
    hits = [len(set(r) & set(g)) for r, g in zip(retrieved, gold)]
    total_gold = sum(len(set(g)) for g in gold)
    return {
        "effective_chunks_per_query": sum(hits) / len(gold),
        "recall_effectiveness": 100.0 * sum(hits) / total_gold if total_gold else 0.0,
    }


def url_hallucinated(answer: str, evidence_texts: Sequence[str], prefix_pool: Sequence[str], checker: StatusChecker) -> bool:
    """True when the answer carries any URL that fails link validation."""
    urls = extract_urls(answer)
    if not urls:
        return False
    verdicts = validate_urls(urls, extract_urls_from(evidence_texts), prefix_pool, checker)
    return any(not v.valid for v in verdicts)


# --- synthetic corpus ------------------------------------------------------------

ATTRIBUTES = [
    "renewal window",
    "refund period",
    "review deadline",
    "billing cycle",
    "appeal window",
    "payout delay",
    "trial length",
    "quota reset",
    "audit interval",
    "credit hold",
]
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
SYNTH_EPOCH = 1_767_225_600  # 2026-01-01T00:00:00Z
HOT_CITATIONS = 3


@dataclass
class SynthCorpus:
    chunks: list[dict]
    cases: list[EvalCase]
    prefix_pool: list[str]
    citations: list[dict]
    percent: int
    http_status: dict[str, int] = field(default_factory=dict)

    def write(self, out_dir: Union[str, Path]) -> dict[str, str]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "corpus": out / "corpus.jsonl",
            "cases": out / "cases.jsonl",
            "citations": out / "citations.jsonl",
            "prefix_pool": out / "prefix_pool.txt",
            "meta": out / "meta.json",
        }
        write_jsonl(paths["corpus"], self.chunks)
        write_jsonl(paths["cases"], (c.to_record() for c in self.cases))
        write_jsonl(paths["citations"], self.citations)
        paths["prefix_pool"].write_text("".join(p + "\n" for p in self.prefix_pool), encoding="utf-8")
        paths["meta"].write_text(json.dumps({"percent": self.percent, "http_status": self.http_status}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return {k: str(v) for k, v in paths.items()}


class _Names:
    """Unique pronounceable pseudo-words, none colliding with template vocabulary."""

    def __init__(self, rng: random.Random, reserved: Iterable[str]):
        self.rng = rng
        self.used = {w.lower() for w in reserved}

    def __call__(self, syllables: int = 3) -> str:
        while True:
            word = "".join(self.rng.choice(_CONSONANTS) + self.rng.choice(_VOWELS) for _ in range(syllables))
            if word not in self.used:
                self.used.add(word)
                return word


def synth_corpus(seed: int, size: int, hop_fraction: float) -> SynthCorpus:
    """Entity-linked support corpus with ``size`` eval cases.

    A direct case is answered by one chunk that repeats the query's entity and
    attribute. A hop case is answered by a chunk about a second entity that
    shares no content term with the query; the only link is a bridge chunk
    mentioning both entities. One filler chunk per case adds lexical noise.
    """
    if size < 10:
        raise ValueError("size must be >= 10")
    if not 0.0 <= hop_fraction <= 1.0:
        raise ValueError("hop_fraction must be in [0, 1]")
    rng = random.Random(seed)
    reserved = set(tokenize(" ".join(ATTRIBUTES))) | set(
        "what applies to delegates decisions sets limit units see for days publishes notes on every weeks docs example kb article https".split()
    )
    name = _Names(rng, reserved)
    hosts = [name(2) for _ in range(3)]
    prefix_pool = [f"https://docs.{h}.example/kb/" for h in hosts]

    n_hop = round(hop_fraction * size)
    hop_cases = set(rng.sample(range(size), n_hop))
    chunks: list[dict] = []
    cases: list[EvalCase] = []
    hot: list[str] = []
    http_status: dict[str, int] = {}
    updated = SYNTH_EPOCH - 86_400

    def add(cid: str, text: str, doc: str) -> None:
        chunks.append({"id": cid, "text": text, "source_doc": doc, "updated_at": updated})

    for i in range(size):
        attr = ATTRIBUTES[rng.randrange(len(ATTRIBUTES))]
        entity = name().capitalize()
        value = rng.randint(2, 90)
        url = f"{prefix_pool[i % len(prefix_pool)]}article-{1000 + i}"
        http_status[url] = 200
        query = f"what {attr} applies to {entity}?"
        gold_id = f"case{i:04d}-gold"
        if i in hop_cases:
            other = name().capitalize()
            bridge_id = f"case{i:04d}-bridge"
            add(bridge_id, f"{entity} delegates {attr} decisions to {other}.", f"doc{i:04d}")
            gold_text = f"{other} sets a limit of {value} units; see {url}"
            hot.append(bridge_id)
            hops = 2
        else:
            gold_text = f"{entity} {attr} applies for {value} days; see {url}"
            hops = 1
        add(gold_id, gold_text, f"doc{i:04d}")
        hot.append(gold_id)
        cases.append(EvalCase(f"case{i:04d}", query, gold_text, [gold_id], hops))

        filler_attr = ATTRIBUTES[rng.randrange(len(ATTRIBUTES))]
        add(f"filler{i:04d}", f"{name().capitalize()} publishes notes on {filler_attr} every {rng.randint(2, 12)} weeks.", f"misc{i:04d}")

    citations = []
    ts = SYNTH_EPOCH
    for k in range(HOT_CITATIONS):
        for cid in hot:
            citations.append({"chunk_id": cid, "ts": ts})
            ts += 1
    for i in range(0, size, 2):
        citations.append({"chunk_id": f"filler{i:04d}", "ts": ts})
        ts += 1
    # smallest integer percent whose ceil-cardinality covers every hot chunk
    percent = next(p for p in range(101) if top_count(p, len(chunks)) >= len(hot))
    return SynthCorpus(chunks, cases, prefix_pool, citations, percent, http_status)


def query_overlap(case: EvalCase, chunk_text: str) -> set[str]:
    return content_terms(case.query) & content_terms(chunk_text)


# --- eval runs -------------------------------------------------------------------


@dataclass
class CaseResult:
    id: str
    query: str
    answer: str
    raw_answer: str
    retrieved_ids: list[str]
    gold_chunk_ids: list[str]
    hallucinated: bool
    raw_hallucinated: bool
    rouge_l: float
    refused: bool
    timings_ms: dict[str, float]

    def to_record(self) -> dict:
        return asdict(self)


def run_eval(pipeline, cases: Sequence[EvalCase], checker: Optional[StatusChecker] = None) -> tuple[list[CaseResult], dict]:
    """Answer every case through the pipeline; URL-based hallucination verdicts for guarded and raw output.

    The raw answer is the generator's unguarded text for the same evidence,
    so the two hallucination rates isolate the guardrail's effect.
    """
    if not cases:
        raise EmptyCaseSet("no eval cases")
    checker = checker or pipeline.checker
    rows = []
    for case in cases:
        resp = pipeline.answer(case.query)
        texts = [pipeline.store.get(cid).text for cid in resp.evidence_ids]
        raw = resp.answer if resp.refused else "".join(pipeline.generator.generate(case.query, [], texts))
        rows.append(
            CaseResult(
                case.id,
                case.query,
                resp.answer,
                raw,
                resp.evidence_ids,
                case.gold_chunk_ids,
                url_hallucinated(resp.answer, texts, pipeline.prefix_pool, checker),
                url_hallucinated(raw, texts, pipeline.prefix_pool, checker),
                rouge_l(resp.answer, case.gold_answer),
                resp.refused,
                resp.timings_ms,
            )
        )
    recall = recall_metrics([r.retrieved_ids for r in rows], [r.gold_chunk_ids for r in rows])
    summary = {
        "cases": len(rows),
        "hallucination_rate": hallucination_rate(r.hallucinated for r in rows),
        "unguarded_hallucination_rate": hallucination_rate(r.raw_hallucinated for r in rows),
        "rouge_l": sum(r.rouge_l for r in rows) / len(rows),
        "refusals": sum(r.refused for r in rows),
        **recall,
    }
    return rows, summary
