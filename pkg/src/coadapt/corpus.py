"""Knowledge chunk store with citation-heat accounting and top-N% snapshots."""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .reward import extract_urls

log = logging.getLogger(__name__)

Timestamp = Union[float, int, str, datetime, None]

DEFAULT_WINDOW_SECONDS = 7 * 24 * 3600.0


class CorpusError(Exception):
    pass


class MalformedRecord(CorpusError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"record {index}: {reason}")
        self.index = index


class UnknownChunk(CorpusError, KeyError):
    pass


def to_epoch(ts: Timestamp) -> float:
    """Accept epoch seconds, ISO-8601 strings or datetimes (naive means UTC)."""
    if ts is None:
        return 0.0
    if isinstance(ts, (int, float)):
        return float(ts)
    if isinstance(ts, str):
        ts = ts.strip()
        try:
            return float(ts)
        except ValueError:
            ts = datetime.fromisoformat(ts.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.timestamp()


@dataclass(frozen=True)
class KnowledgeChunk:
    id: str
    text: str
    urls: tuple[str, ...]
    source_doc: str = ""
    updated_at: float = 0.0

    @classmethod
    def create(cls, id: str, text: str, source_doc: str = "", updated_at: Timestamp = None) -> "KnowledgeChunk":
        return cls(id, text, tuple(extract_urls(text)), source_doc, to_epoch(updated_at))

    def to_record(self) -> dict:
        return {"id": self.id, "text": self.text, "source_doc": self.source_doc, "updated_at": self.updated_at}


@dataclass(frozen=True)
class CitationHeat:
    chunk_id: str
    count: int
    window_start: float


@dataclass(frozen=True)
class HighCitationSnapshot:
    chunk_ids: tuple[str, ...]
    percent: int
    created_at: float

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self.chunk_ids

    def __len__(self) -> int:
        return len(self.chunk_ids)


@dataclass
class IngestStats:
    added: int = 0
    replaced: int = 0


def top_count(percent: int, total: int) -> int:
    """ceil(percent/100 * total) with integer arithmetic, clamped to [0, total]."""
    return max(0, min(total, -(-percent * total // 100)))


def rank_key(chunk: KnowledgeChunk, heat: int):
    # heat desc, then most recently updated, then id asc
    return (-heat, -chunk.updated_at, chunk.id)


class CorpusStore:
    """In-memory index backed by an optional append-only journal.

    With ``root`` set, every ingest, citation and rollover is appended to
    ``root/store.jsonl`` and the journal is replayed on open, so the store
    and its active snapshot survive restarts exactly. Writers take an
    exclusive lock; the active snapshot is swapped by a single reference
    assignment, so readers never see a half-built one.
    """

    def __init__(self, root: Optional[Union[str, Path]] = None, window_seconds: float = DEFAULT_WINDOW_SECONDS):
        if window_seconds <= 0:
            raise ValueError("window_seconds must be positive")
        self.root = Path(root) if root is not None else None
        self.window_seconds = float(window_seconds)
        self._chunks: dict[str, KnowledgeChunk] = {}
        self._heat: dict[str, int] = {}
        self._window_start: Optional[float] = None
        self._window_citations = 0
        self._ranking_heat: dict[str, int] = {}
        self._active: Optional[HighCitationSnapshot] = None
        self._lock = threading.RLock()
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._replay()

    # -- persistence --------------------------------------------------------

    @property
    def journal_path(self) -> Optional[Path]:
        return self.root / "store.jsonl" if self.root else None

    def _replay(self) -> None:
        if not self.journal_path.exists():
            return
        with open(self.journal_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                entry = json.loads(line)
                op = entry.pop("op")
                if op == "chunk":
                    self._apply_records([entry])
                elif op == "cite":
                    self._cite(entry["chunk_id"], float(entry["ts"]))
                elif op == "rollover":
                    self._roll(int(entry["percent"]), float(entry["ts"]))
                else:
                    raise CorpusError(f"unknown journal op {op!r}")

    def _journal(self, rows: Iterable[dict]) -> None:
        if self.journal_path is None:
            return
        with open(self.journal_path, "a", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")

    # -- chunks -------------------------------------------------------------

    @staticmethod
    def _validate(records: Sequence[Mapping]) -> list[KnowledgeChunk]:
        chunks = []
        for i, rec in enumerate(records):
            if not isinstance(rec, Mapping):
                raise MalformedRecord(i, "not an object")
            cid, text = rec.get("id"), rec.get("text")
            if not isinstance(cid, str) or not cid:
                raise MalformedRecord(i, "missing or empty id")
            if not isinstance(text, str) or not text:
                raise MalformedRecord(i, "missing or empty text")
            try:
                updated = to_epoch(rec.get("updated_at"))
            except (TypeError, ValueError) as exc:
                raise MalformedRecord(i, f"bad updated_at: {exc}") from exc
            chunks.append(KnowledgeChunk.create(cid, text, str(rec.get("source_doc") or ""), updated))
        return chunks

    def _apply_records(self, records: Sequence[Mapping]) -> IngestStats:
        stats = IngestStats()
        for chunk in self._validate(records):
            if chunk.id in self._chunks:
                stats.replaced += 1
            else:
                stats.added += 1
                self._heat.setdefault(chunk.id, 0)
            self._chunks[chunk.id] = chunk
        return stats

    def ingest_chunks(self, records: Sequence[Mapping]) -> IngestStats:
        """Validate every record first, then add or replace by id."""
        with self._lock:
            chunks = self._validate(records)
            stats = self._apply_records(records)
            self._journal({"op": "chunk", **c.to_record()} for c in chunks)
            return stats

    def get(self, chunk_id: str) -> KnowledgeChunk:
        try:
            return self._chunks[chunk_id]
        except KeyError:
            raise UnknownChunk(chunk_id) from None

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._chunks

    def __len__(self) -> int:
        return len(self._chunks)

    def chunks(self) -> list[KnowledgeChunk]:
        return [self._chunks[k] for k in sorted(self._chunks)]

    def ids(self) -> list[str]:
        return sorted(self._chunks)

    # -- citation heat ------------------------------------------------------

    def _window_for(self, at: float) -> float:
        return math.floor(at / self.window_seconds) * self.window_seconds

    def _rollover(self, start: float) -> None:
        self._heat = {k: 0 for k in self._chunks}
        self._window_start = start
        self._window_citations = 0

    def _cite(self, chunk_id: str, at: float) -> int:
        if chunk_id not in self._chunks:
            raise UnknownChunk(chunk_id)
        if self._window_start is None:
            self._window_start = self._window_for(at)
        elif at >= self._window_start + self.window_seconds:
            self._rollover(self._window_for(at))
        self._heat[chunk_id] = self._heat.get(chunk_id, 0) + 1
        self._window_citations += 1
        return self._heat[chunk_id]

    def record_citation(self, chunk_id: str, at: Timestamp = None) -> int:
        """Count one recall of ``chunk_id``; rolls the window first if ``at`` is past it."""
        ts = to_epoch(at) if at is not None else datetime.now(timezone.utc).timestamp()
        with self._lock:
            count = self._cite(chunk_id, ts)
            self._journal([{"op": "cite", "chunk_id": chunk_id, "ts": ts}])
            return count

    def replay_citations(self, entries: Iterable[Mapping]) -> int:
        n = 0
        for entry in entries:
            self.record_citation(entry["chunk_id"], entry["ts"])
            n += 1
        return n

    def heat(self, chunk_id: str) -> CitationHeat:
        if chunk_id not in self._chunks:
            raise UnknownChunk(chunk_id)
        return CitationHeat(chunk_id, self._heat.get(chunk_id, 0), self._window_start or 0.0)

    def heat_report(self) -> list[CitationHeat]:
        with self._lock:
            ranked = sorted(self._chunks.values(), key=lambda c: rank_key(c, self._heat.get(c.id, 0)))
            return [CitationHeat(c.id, self._heat.get(c.id, 0), self._window_start or 0.0) for c in ranked]

    def heat_counts(self) -> dict[str, int]:
        return {k: self._heat.get(k, 0) for k in self._chunks}

    # -- high-citation subset -----------------------------------------------

    def _select(self, percent: int, heat: Mapping[str, int], now: float) -> HighCitationSnapshot:
        if isinstance(percent, bool) or not isinstance(percent, int) or not 0 <= percent <= 100:
            raise ValueError(f"percent must be an integer in [0, 100], got {percent!r}")
        k = top_count(percent, len(self._chunks))
        ranked = sorted(self._chunks.values(), key=lambda c: rank_key(c, heat.get(c.id, 0)))
        return HighCitationSnapshot(tuple(c.id for c in ranked[:k]), percent, now)

    def select_high_citation(self, percent: int, now: Timestamp = None) -> HighCitationSnapshot:
        with self._lock:
            return self._select(percent, self._heat, to_epoch(now))

    def rolling_update(self, percent: int, now: Timestamp = None) -> HighCitationSnapshot:
        """Close the current window, publish a new snapshot, start a fresh window.

        A window that saw no citations carries no new traffic signal, so the
        ranking falls back to the heat of the last window that did.
        """
        ts = to_epoch(now) if now is not None else datetime.now(timezone.utc).timestamp()
        with self._lock:
            snapshot = self._roll(percent, ts)
            self._journal([{"op": "rollover", "percent": percent, "ts": ts}])
            return snapshot

    def _roll(self, percent: int, ts: float) -> HighCitationSnapshot:
        if self._window_citations > 0:
            self._ranking_heat = dict(self._heat)
        snapshot = self._select(percent, self._ranking_heat, ts)
        self._rollover(self._window_for(ts))
        self._active = snapshot
        return snapshot

    @property
    def active_snapshot(self) -> Optional[HighCitationSnapshot]:
        return self._active

    def set_active(self, snapshot: HighCitationSnapshot) -> None:
        self._active = snapshot


def load_jsonl(path: Union[str, Path]) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path: Union[str, Path], rows: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
