from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

RRF_K = 60


@dataclass(frozen=True)
class ScoredChunk:
    chunk_id: str
    score: float
    channel: str  # graph | lexical | dense | hybrid
    text: Optional[str] = None  # only for chunks from outside the store

    def __post_init__(self):
        if not math.isfinite(self.score) or self.score < 0:
            raise ValueError(f"score must be finite and non-negative, got {self.score}")


def top_k(items: Iterable[ScoredChunk], k: int) -> list[ScoredChunk]:
    """Descending score, ascending id on ties."""
    return sorted(items, key=lambda s: (-s.score, s.chunk_id))[:k]


def rrf_scores(lists: Sequence[Sequence[ScoredChunk]], constant: int = RRF_K) -> dict[str, float]:
    scores: dict[str, float] = {}
    for ranked in lists:
        seen = set()
        rank = 0
        for item in ranked:
            if item.chunk_id in seen:
                continue
            seen.add(item.chunk_id)
            rank += 1
            scores[item.chunk_id] = scores.get(item.chunk_id, 0.0) + 1.0 / (constant + rank)
    return scores


def fuse(*lists: Sequence[ScoredChunk], k: int = 10, channel: str = "hybrid", constant: int = RRF_K) -> list[ScoredChunk]:
    """Reciprocal-rank fusion: score = sum over lists of 1/(constant + rank)."""
    scores = rrf_scores(lists, constant)
    return top_k((ScoredChunk(cid, s, channel) for cid, s in scores.items()), k)
