"""Streaming URL/safety guardrail.

The guarded output is a function of the whole input text; the streaming
state machine only decides how early each piece of that output can be
released. Every candidate run (see ``coadapt.reward`` for the grammar) is
either emitted verbatim after validation or replaced by the placeholder, so
no unvalidated link reaches the client no matter how the stream is chunked.

Plain text between candidates goes through a whole-token blocklist. Text is
held back only while it could still turn into a scheme (``h``..``https://``)
or extend a token short enough to be a blocklist term.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

from .reward import (
    SCHEME_PATTERN,
    URI_CHAR_RE,
    URI_CHARS,
    StatusChecker,
    canonicalize,
    extract_urls_from,
    strip_trailing,
    validate_urls,
)

PLACEHOLDER = "[link removed]"
SAFETY_MASK = "■"
MAX_URL_LENGTH = 2048

_CANDIDATE_RE = re.compile(SCHEME_PATTERN + "[" + URI_CHARS + "]")
_SCHEME_PREFIXES = frozenset(s[:i] for s in ("http://", "https://") for i in range(1, len(s) + 1))
_WORD_RE = re.compile(r"\w+")
_TRAILING_WORD_RE = re.compile(r"\w+\Z")


@dataclass(frozen=True)
class GuardrailEvent:
    kind: str  # url_redacted | url_passed | safety_redacted
    span: str
    position: int

    def as_dict(self) -> dict:
        return {"kind": self.kind, "span": self.span, "position": self.position}


@dataclass
class GuardrailState:
    held: str = ""
    in_candidate: bool = False
    skipping: bool = False  # dropping the tail of an over-long candidate
    word_open: bool = False  # last released plain text ended mid-token
    offset: int = 0  # stream offset of held[0]
    events: list[GuardrailEvent] = field(default_factory=list)
    cache: dict[str, bool] = field(default_factory=dict)
    max_held: int = 0


UrlValidator = Callable[[str], bool]


def evidence_validator(
    evidence_texts: Iterable[str],
    prefix_pool: Sequence[str] = (),
    checker: Optional[StatusChecker] = None,
) -> UrlValidator:
    """Validator applying the reward engine's rules to one canonical URL."""
    evidence_urls = set(extract_urls_from(evidence_texts))

    def never(url: str) -> Optional[int]:
        return None

    probe = checker or never

    def validate(url: str) -> bool:
        (verdict,) = validate_urls([url], evidence_urls, prefix_pool, probe)
        return verdict.valid

    return validate


class Guardrail:
    def __init__(
        self,
        validator: UrlValidator,
        blocklist: Iterable[str] = (),
        max_url_length: int = MAX_URL_LENGTH,
        placeholder: str = PLACEHOLDER,
    ):
        self.validator = validator
        # whole-token matching: terms that are not a single word token can never match
        self.blocklist = frozenset(t.lower() for t in blocklist if _WORD_RE.fullmatch(t))
        self.max_term_len = max((len(t) for t in self.blocklist), default=0)
        self.max_url_length = max_url_length
        self.placeholder = placeholder

    def new_state(self) -> GuardrailState:
        return GuardrailState()

    # -- public stream API --------------------------------------------------

    def scan_chunk(self, state: GuardrailState, chunk: str) -> tuple[str, GuardrailState]:
        state.held += chunk
        out = self._drain(state, final=False)
        state.max_held = max(state.max_held, len(state.held))
        return out, state

    def finalize(self, state: GuardrailState) -> str:
        out = self._drain(state, final=True)
        state.held = ""
        state.in_candidate = False
        state.skipping = False
        return out

    def filter_stream(self, chunks: Iterable[str], state: Optional[GuardrailState] = None) -> Iterator[str]:
        state = state or self.new_state()
        for chunk in chunks:
            out, state = self.scan_chunk(state, chunk)
            if out:
                yield out
        tail = self.finalize(state)
        if tail:
            yield tail

    def apply(self, text: str) -> tuple[str, list[GuardrailEvent]]:
        state = self.new_state()
        out, _ = self.scan_chunk(state, text)
        return out + self.finalize(state), state.events

    # -- internals ----------------------------------------------------------

    def _consume(self, state: GuardrailState, n: int) -> str:
        taken = state.held[:n]
        state.held = state.held[n:]
        state.offset += n
        return taken

    def _drain(self, state: GuardrailState, final: bool) -> str:
        parts: list[str] = []
        while state.held:
            if state.skipping:
                i = 0
                while i < len(state.held) and URI_CHAR_RE.match(state.held, i):
                    i += 1
                self._consume(state, i)
                if not state.held and not final:
                    break
                state.skipping = False
                continue

            m = _CANDIDATE_RE.search(state.held)
            if m is None:
                parts.append(self._release_plain(state, final))
                break
            if m.start() > 0:
                parts.append(self._plain(state, self._consume(state, m.start()), cut=False))
                continue

            # candidate run starts at held[0]
            end = m.end()
            while end < len(state.held) and URI_CHAR_RE.match(state.held, end):
                end += 1
            if end > self.max_url_length:
                run = state.held[: self.max_url_length]
                self._record(state, "url_redacted", run)
                parts.append(self.placeholder)
                self._consume(state, self.max_url_length)
                state.skipping = True
                state.in_candidate = False
                state.word_open = False
                continue
            if end == len(state.held) and not final:
                state.in_candidate = True
                break
            state.in_candidate = False
            state.word_open = False
            parts.append(self._resolve_run(state, state.held[:end]))
        return "".join(parts)

    def _release_plain(self, state: GuardrailState, final: bool) -> str:
        """Emit held plain text, keeping back what later input could still change."""
        if final:
            return self._plain(state, self._consume(state, len(state.held)), cut=False)
        text = state.held
        hold = len(text)
        for k in range(min(8, len(text)), 0, -1):
            if text[-k:].lower() in _SCHEME_PREFIXES:
                hold = len(text) - k
                break
        if self.max_term_len:
            # a short trailing token may still grow into a blocklisted one;
            # one longer than every term never can
            w = _TRAILING_WORD_RE.search(text, 0, hold)
            if w and not (w.start() == 0 and state.word_open) and hold - w.start() <= self.max_term_len:
                hold = w.start()
        return self._plain(state, self._consume(state, hold), cut=True)

    def _plain(self, state: GuardrailState, text: str, cut: bool) -> str:
        """Mask blocklisted tokens. ``cut`` means the plain segment continues after ``text``."""
        if not text:
            return text
        continues = state.word_open
        state.word_open = bool(cut and _WORD_RE.match(text[-1]))
        if not self.blocklist:
            return text
        base = state.offset - len(text)

        def mask(m: re.Match) -> str:
            if continues and m.start() == 0:
                return m.group(0)
            if m.group(0).lower() in self.blocklist:
                self._record(state, "safety_redacted", m.group(0), base + m.start())
                return SAFETY_MASK * len(m.group(0))
            return m.group(0)

        return _WORD_RE.sub(mask, text)

    def _resolve_run(self, state: GuardrailState, run: str) -> str:
        url_text = strip_trailing(run)
        tail = run[len(url_text) :]
        canonical = canonicalize(run)
        valid = False
        if canonical is not None:
            if canonical not in state.cache:
                state.cache[canonical] = bool(self.validator(canonical))
            valid = state.cache[canonical]
        self._record(state, "url_passed" if valid else "url_redacted", url_text)
        self._consume(state, len(run))
        return (url_text if valid else self.placeholder) + tail

    def _record(self, state: GuardrailState, kind: str, span: str, position: Optional[int] = None) -> None:
        state.events.append(GuardrailEvent(kind, span, state.offset if position is None else position))
