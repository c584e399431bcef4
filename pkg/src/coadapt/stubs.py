"""Deterministic in-process stand-ins for the external model clients."""

from __future__ import annotations

import hashlib
import json
import re
import time
from typing import Callable, Iterator, Mapping, Optional, Sequence

from .text import content_terms, tokenize

# --- judges ------------------------------------------------------------------

_SECTION_RE = re.compile(r"^\[(Query|Dialogue History|Materials|Answer A|Answer B)\]: ", re.MULTILINE)


def split_judge_prompt(prompt: str) -> dict[str, str]:
    """Recover the filled-in fields from a prompt built by ``reward.build_judge_prompt``."""
    marks = list(_SECTION_RE.finditer(prompt))
    out = {}
    for m, nxt in zip(marks, marks[1:] + [None]):
        end = nxt.start() if nxt else prompt.find("\n\nRespond with JSON", m.end())
        out[m.group(1)] = prompt[m.end() : end if end >= 0 else len(prompt)].strip()
    return out


def judge_body(grade: str, style: int, safety: int, reason: str = "") -> str:
    return json.dumps(
        {"scores": {"Evidence Faithfulness": {"reason": reason, "grade": grade}, "Style Compliance": style, "Safety": safety}}
    )


class FixedJudge:
    """Returns the same verdict for every prompt."""

    def __init__(self, grade: str = "G", style: int = 8, safety: int = 9):
        self.body = judge_body(grade, style, safety, "fixed stub verdict")
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        return self.body


class ScriptedJudge:
    """Plays back raw bodies in order (the last one repeats)."""

    def __init__(self, bodies: Sequence[str]):
        self.bodies = list(bodies)
        self.calls = 0

    def complete(self, prompt: str) -> str:
        body = self.bodies[min(self.calls, len(self.bodies) - 1)]
        self.calls += 1
        return body


class FailingClient:
    """Raises on every call; ``delay`` seconds first, to model timeouts."""

    def __init__(self, exc: Exception = TimeoutError("stub timeout"), delay: float = 0.0):
        self.exc = exc
        self.delay = delay

    def _fail(self, *args, **kwargs):
        if self.delay:
            time.sleep(self.delay)
        raise self.exc

    complete = rewrite = embed = score = generate = _fail


class RuleJudge:
    """Grades by surface features, the way the toy GRPO environment needs.

    Faithfulness is G when Answer B contains Answer A verbatim (case and
    whitespace folded), S when it shares at least half of A's content terms,
    else B. Style and safety drop to the ``*_bad`` score when any configured
    marker token appears in B.
    """

    def __init__(
        self,
        informal_markers: Sequence[str] = ("lol", "gonna", "dunno", "!!!"),
        unsafe_markers: Sequence[str] = ("guaranteed", "hack", "bypass"),
        style_good: int = 10,
        style_bad: int = 2,
        safety_good: int = 10,
        safety_bad: int = 1,
    ):
        self.informal = [m.lower() for m in informal_markers]
        self.unsafe = [m.lower() for m in unsafe_markers]
        self.style_good, self.style_bad = style_good, style_bad
        self.safety_good, self.safety_bad = safety_good, safety_bad

    @classmethod
    def from_rules(cls, rules: Mapping) -> "RuleJudge":
        return cls(**{k: v for k, v in rules.items() if k in cls.__init__.__code__.co_varnames})

    @staticmethod
    def _has(markers: Sequence[str], text: str) -> bool:
        tokens = set(tokenize(text))
        low = text.lower()
        return any((m in tokens) if m.isalnum() else (m in low) for m in markers)

    def verdict(self, reference: str, answer: str) -> tuple[str, int, int]:
        fold = lambda s: " ".join(s.lower().split())
        if reference and fold(reference) in fold(answer):
            grade = "G"
        else:
            ref_terms = content_terms(reference)
            shared = len(ref_terms & content_terms(answer))
            grade = "S" if ref_terms and shared * 2 >= len(ref_terms) else "B"
        style = self.style_bad if self._has(self.informal, answer) else self.style_good
        safety = self.safety_bad if self._has(self.unsafe, answer) else self.safety_good
        return grade, style, safety

    def complete(self, prompt: str) -> str:
        fields = split_judge_prompt(prompt)
        grade, style, safety = self.verdict(fields.get("Answer A", ""), fields.get("Answer B", ""))
        return judge_body(grade, style, safety, "rule-based stub")


# --- rewriters ---------------------------------------------------------------


class EchoRewriter:
    def rewrite(self, query: str) -> list[str]:
        return [query, query, query]


class TemplateRewriter:
    """Three distinct surface variants of the query."""

    def rewrite(self, query: str) -> list[str]:
        q = query.strip().rstrip("?")
        return [f"{q} policy", f"how does {q} work", f"details about {q}"]


class SleepyRewriter:
    def __init__(self, delay: float, inner=None):
        self.delay = delay
        self.inner = inner or TemplateRewriter()

    def rewrite(self, query: str) -> list[str]:
        time.sleep(self.delay)
        return self.inner.rewrite(query)


# --- rerankers ---------------------------------------------------------------


class IdentityReranker:
    def score(self, query: str, passages: Sequence[str]) -> list[float]:
        return [0.0] * len(passages)


class OverlapReranker:
    """Score = number of distinct query tokens present in the passage."""

    def score(self, query: str, passages: Sequence[str]) -> list[float]:
        q = set(tokenize(query))
        return [float(len(q & set(tokenize(p)))) for p in passages]


class SleepyReranker:
    def __init__(self, delay: float, inner=None):
        self.delay = delay
        self.inner = inner or OverlapReranker()

    def score(self, query: str, passages: Sequence[str]) -> list[float]:
        time.sleep(self.delay)
        return self.inner.score(query, passages)


# --- generators --------------------------------------------------------------


def _stream_words(text: str) -> Iterator[str]:
    # small uneven pieces so URLs are split across chunk boundaries
    i = 0
    step = 7
    while i < len(text):
        yield text[i : i + step]
        i += step
        step = 3 + (step * 5) % 11


def _digest(*parts: str) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()[:8], "big")


class FaithfulEchoGenerator:
    """Answers with the top evidence chunk verbatim."""

    persona = "faithful-echo"

    def generate(self, query: str, history: Sequence[str], evidence: Sequence[str]) -> Iterator[str]:
        text = evidence[0] if evidence else ""
        yield from _stream_words(text)


class UrlFabricatorGenerator:
    """Echoes the top evidence chunk; for a seeded half of queries appends an invented link."""

    persona = "url-fabricator"

    def __init__(self, rate: float = 0.5, seed: int = 0, host: str = "https://help.adsphere-support.example"):
        self.rate = rate
        self.seed = seed
        self.host = host

    def fabricates(self, query: str) -> bool:
        return (_digest(str(self.seed), query) % 10_000) / 10_000 < self.rate

    def generate(self, query: str, history: Sequence[str], evidence: Sequence[str]) -> Iterator[str]:
        text = evidence[0] if evidence else ""
        if self.fabricates(query):
            slug = "-".join(tokenize(query)[:4]) or "page"
            text += f" Full walkthrough: {self.host}/kb/{slug}-{_digest(query) % 9973}."
        yield from _stream_words(text)


class VerboseGenerator:
    """Restates every evidence chunk with filler around it."""

    persona = "verbose"

    def generate(self, query: str, history: Sequence[str], evidence: Sequence[str]) -> Iterator[str]:
        parts = [f"Thanks for asking about: {query}."]
        for i, text in enumerate(evidence, 1):
            parts.append(f"Point {i}: {text}")
        parts.append("Let me know if there is anything else at all I can help with today.")
        yield from _stream_words(" ".join(parts))


class ScriptedGenerator:
    def __init__(self, text: str, chunks: Optional[Sequence[str]] = None):
        self.text = text
        self.chunks = chunks
        self.calls = 0

    def generate(self, query: str, history: Sequence[str], evidence: Sequence[str]) -> Iterator[str]:
        self.calls += 1
        if self.chunks is not None:
            yield from self.chunks
        else:
            yield from _stream_words(self.text)


GENERATORS: dict[str, Callable[[], object]] = {
    "faithful-echo": FaithfulEchoGenerator,
    "url-fabricator": UrlFabricatorGenerator,
    "verbose": VerboseGenerator,
}

