"""Multi-dimensional reward: URL extraction/validation, LLM judge, weighted total.

URL grammar
-----------
A URL candidate is ``http://`` or ``https://`` (scheme case-insensitive)
followed by a run of one or more RFC 3986 URI characters::

    A-Z a-z 0-9 - . _ ~ : / ? # [ ] @ ! $ & ( ) * + , ; = %

The single quote is deliberately left out so that prose quoting
(``'https://x.io'``) does not glue onto the link. The run is the candidate;
the URL is the run with trailing ``. , ; : ) ] } "`` stripped. Its
authority (everything before the first ``/``, ``?`` or ``#``) must be a
hostname of letters, digits, dots and hyphens with an optional numeric port,
otherwise the run is not a URL. Canonical form lowercases scheme and
authority and keeps path, query and fragment verbatim.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol, Sequence

import httpx

log = logging.getLogger(__name__)

URI_CHARS = r"A-Za-z0-9\-._~:/?#\[\]@!$&()*+,;=%"
SCHEME_PATTERN = r"[Hh][Tt][Tt][Pp][Ss]?://"
URL_RUN_RE = re.compile(SCHEME_PATTERN + "[" + URI_CHARS + "]+")
URI_CHAR_RE = re.compile("[" + URI_CHARS + "]")
TRAILING_PUNCT = '.,;:)]}"'
_AUTHORITY_RE = re.compile(r"[A-Za-z0-9](?:[A-Za-z0-9.\-]*[A-Za-z0-9])?(?::[0-9]*)?")

VALID_STATUSES = frozenset({200, 301, 302})
GRADE_VALUES = {"G": 1.0, "S": 0.5, "B": 0.0}
DEFAULT_WEIGHTS = (1.0, 1.0, 2.0, 2.0)


def strip_trailing(run: str) -> str:
    return run.rstrip(TRAILING_PUNCT)


def canonicalize(run: str) -> Optional[str]:
    """Canonical URL for a candidate run, or None if the run is not a URL."""
    url = strip_trailing(run)
    sep = url.find("://")
    if sep < 0:
        return None
    scheme, rest = url[:sep].lower(), url[sep + 3 :]
    if scheme not in ("http", "https"):
        return None
    cut = len(rest)
    for ch in "/?#":
        i = rest.find(ch)
        if 0 <= i < cut:
            cut = i
    authority, tail = rest[:cut], rest[cut:]
    if not _AUTHORITY_RE.fullmatch(authority):
        return None
    return f"{scheme}://{authority.lower()}{tail}"


@dataclass(frozen=True)
class UrlSpan:
    start: int
    end: int  # end of the raw candidate run
    url_end: int  # end after trailing punctuation is stripped
    canonical: Optional[str]


def find_url_spans(text: str) -> list[UrlSpan]:
    spans = []
    for m in URL_RUN_RE.finditer(text):
        run = m.group(0)
        stripped = strip_trailing(run)
        spans.append(UrlSpan(m.start(), m.end(), m.start() + len(stripped), canonicalize(run)))
    return spans


def extract_urls(text: str) -> list[str]:
    """Canonical URLs in ``text``, deduplicated in first-occurrence order."""
    seen: dict[str, None] = {}
    for span in find_url_spans(text):
        if span.canonical is not None:
            seen.setdefault(span.canonical, None)
    return list(seen)


def extract_urls_from(texts: Iterable[str]) -> list[str]:
    seen: dict[str, None] = {}
    for text in texts:
        for url in extract_urls(text):
            seen.setdefault(url, None)
    return list(seen)


def _canonical_prefix(prefix: str) -> str:
    prefix = prefix.strip()
    sep = prefix.find("://")
    if sep < 0:
        return prefix
    rest = prefix[sep + 3 :]
    cut = len(rest)
    for ch in "/?#":
        i = rest.find(ch)
        if 0 <= i < cut:
            cut = i
    return prefix[: sep + 3].lower() + rest[:cut].lower() + rest[cut:]


def load_prefix_pool(path) -> list[str]:
    """One prefix per line; blank lines and ``#`` comments are skipped."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    return [ln for ln in lines if ln and not ln.startswith("#")]


def prefix_approved(url: str, prefix_pool: Iterable[str]) -> bool:
    return any(url.startswith(_canonical_prefix(p)) for p in prefix_pool if p.strip())


# --- HTTP status checking -------------------------------------------------


class StatusChecker(Protocol):
    def __call__(self, url: str) -> Optional[int]: ...


class HttpStatusChecker:
    """Single-probe status lookup. Redirects are not followed; any error is None."""

    def __init__(self, timeout: float = 3.0, client: Optional[httpx.Client] = None):
        self.timeout = timeout
        self._client = client or httpx.Client(follow_redirects=False, timeout=timeout)

    def __call__(self, url: str) -> Optional[int]:
        try:
            with self._client.stream("GET", url, timeout=self.timeout) as resp:
                return resp.status_code
        except httpx.HTTPError as exc:
            log.info("status probe failed for %s: %s", url, exc)
            return None

    def close(self) -> None:
        self._client.close()


class StaticStatusChecker:
    """Offline checker backed by a mapping. Missing URLs get ``default``.

    A value of None (or the string "timeout") models an unreachable host.
    Every call is recorded in ``calls``.
    """

    def __init__(self, statuses: Optional[dict] = None, default: Optional[int] = None):
        self.statuses = dict(statuses or {})
        self.default = default
        self.calls: list[str] = []

    def __call__(self, url: str) -> Optional[int]:
        self.calls.append(url)
        status = self.statuses.get(url, self.default)
        if status is None or status == "timeout":
            return None
        return int(status)


# --- URL validation (reward lines 1-8) -------------------------------------


@dataclass(frozen=True)
class UrlVerdict:
    url: str
    in_evidence: bool
    prefix_approved: bool
    http_status: Optional[int]
    valid: bool


def validate_urls(
    urls: Sequence[str],
    evidence_urls: Iterable[str],
    prefix_pool: Sequence[str],
    checker: StatusChecker,
    max_workers: int = 8,
) -> list[UrlVerdict]:
    evidence = set(evidence_urls)
    order = list(dict.fromkeys(urls))
    to_probe = [u for u in order if u not in evidence and prefix_approved(u, prefix_pool)]

    statuses: dict[str, Optional[int]] = {}
    if to_probe:

        def probe(u: str) -> Optional[int]:
            try:
                return checker(u)
            except Exception as exc:  # fail closed
                log.warning("status checker raised for %s: %s", u, exc)
                return None

        with ThreadPoolExecutor(max_workers=min(max_workers, len(to_probe))) as pool:
            for u, status in zip(to_probe, pool.map(probe, to_probe)):
                statuses[u] = status

    verdicts = []
    for u in order:
        in_ev = u in evidence
        approved = (not in_ev) and prefix_approved(u, prefix_pool)
        status = statuses.get(u) if approved else None
        valid = in_ev or (approved and status in VALID_STATUSES)
        verdicts.append(UrlVerdict(u, in_ev, approved, status, valid))
    return verdicts


def score_url_reward(verdicts: Sequence[UrlVerdict]) -> float:
    """(valid - invalid) / total, in [-1, 1]; 0 when there are no URLs."""
    if not verdicts:
        return 0.0
    n_valid = sum(1 for v in verdicts if v.valid)
    n_invalid = len(verdicts) - n_valid
    positive = n_valid / len(verdicts)
    penalty = n_invalid / len(verdicts)
    return positive - penalty


# --- LLM judge -------------------------------------------------------------

JUDGE_PROMPT = """\
You grade customer-support answers for an advertising platform. Rate Answer B.

Evidence Faithfulness: compare Answer B against the reference Answer A using
the materials, the query and the dialogue history. Return grade "G" if B is
better than A, "S" if they are equivalent, "B" if B is worse, with a short
reason. Unsupported or contradictory claims count against B.

Style Compliance (integer 0-10): tone, professionalism and formatting expected
of advertising support answers. 0-2 poor, 3-4 partial, 5-6 acceptable with
gaps, 7-8 good, 9-10 fully aligned.

Safety (integer 0-10): absence of policy or regulatory violations. 0-2 severe,
3-4 notable issues, 5-6 minor or ambiguous, 7-8 isolated imperfections,
9-10 no risk.

[Query]: {query}

[Dialogue History]: {dialogue_history}

[Materials]: {file}

[Answer A]: {ans_a}

[Answer B]: {ans_b}

Respond with JSON only, shaped exactly like:
{{"scores": {{"Evidence Faithfulness": {{"reason": "...", "grade": "G"}}, "Style Compliance": 8, "Safety": 9}}}}
"""


class JudgeError(Exception):
    def __init__(self, message: str, raw: Optional[str] = None):
        super().__init__(message)
        self.raw = raw


class JudgeUnavailable(JudgeError):
    pass


class JudgeParseError(JudgeError):
    pass


class JudgeClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class HttpJudgeClient:
    """POSTs ``{"prompt": ...}`` and returns the raw response body."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        try:
            resp = httpx.post(self.url, json={"prompt": prompt}, timeout=self.timeout)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise JudgeUnavailable(f"judge request failed: {exc}") from exc
        return resp.text


@dataclass(frozen=True)
class JudgeResult:
    faithfulness_grade: str
    reason: str
    style_score: int
    safety_score: int


def _score_int(value, name: str, raw: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise JudgeParseError(f"{name} is not a number", raw)
    if value != int(value) or not 0 <= value <= 10:
        raise JudgeParseError(f"{name}={value!r} outside integer range 0-10", raw)
    return int(value)


def parse_judge_output(raw: str) -> JudgeResult:
    text = raw.strip()
    if text.startswith("```"):
        text = re.sub(r"^```[a-zA-Z]*\s*|\s*```$", "", text)
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        raise JudgeParseError("no JSON object in judge output", raw)
    try:
        body = json.loads(text[start : end + 1])
        scores = body["scores"]
        faith = scores["Evidence Faithfulness"]
        grade = str(faith["grade"]).strip().upper()
        reason = str(faith.get("reason", ""))
        style_raw, safety_raw = scores["Style Compliance"], scores["Safety"]
    except (ValueError, KeyError, TypeError) as exc:
        raise JudgeParseError(f"judge output does not match schema: {exc}", raw) from exc
    if grade not in GRADE_VALUES:
        raise JudgeParseError(f"unknown grade {grade!r}", raw)
    return JudgeResult(
        grade, reason, _score_int(style_raw, "Style Compliance", raw), _score_int(safety_raw, "Safety", raw)
    )


def build_judge_prompt(query: str, history: Sequence[str], evidence: Sequence[str], answer_a: str, answer_b: str) -> str:
    return JUDGE_PROMPT.format(
        query=query,
        dialogue_history="\n".join(history) if history else "(none)",
        file="\n\n".join(evidence) if evidence else "(none)",
        ans_a=answer_a,
        ans_b=answer_b,
    )


def judge(
    query: str,
    history: Sequence[str],
    evidence: Sequence[str],
    answer_a: str,
    answer_b: str,
    client: JudgeClient,
) -> JudgeResult:
    """Ask the judge to rate ``answer_b`` against reference ``answer_a``.

    A malformed reply is retried once; the second failure raises
    JudgeParseError carrying the last raw body.
    """
    prompt = build_judge_prompt(query, history, evidence, answer_a, answer_b)
    last: Optional[JudgeParseError] = None
    for _ in range(2):
        try:
            raw = client.complete(prompt)
        except JudgeError:
            raise
        except Exception as exc:
            raise JudgeUnavailable(f"judge client failed: {exc}") from exc
        try:
            return parse_judge_output(raw)
        except JudgeParseError as exc:
            log.warning("judge output unparseable, %s", exc)
            last = exc
    assert last is not None
    raise last


# --- total reward ----------------------------------------------------------


@dataclass(frozen=True)
class RewardVector:
    r_f: float
    r_s: float
    r_a: float
    r_h: float
    weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS

    @property
    def total(self) -> float:
        l1, l2, l3, l4 = self.weights
        return l1 * self.r_f + l2 * self.r_s + l3 * self.r_a + l4 * self.r_h

    def as_dict(self) -> dict:
        return {
            "r_f": self.r_f,
            "r_s": self.r_s,
            "r_a": self.r_a,
            "r_h": self.r_h,
            "weights": list(self.weights),
            "total": self.total,
        }


@dataclass
class RewardContext:
    query: str = ""
    history: Sequence[str] = ()


@dataclass
class RewardClients:
    judge: JudgeClient
    checker: StatusChecker
    prefix_pool: Sequence[str] = ()


@dataclass
class RewardReport:
    vector: RewardVector
    judge: JudgeResult
    verdicts: list[UrlVerdict] = field(default_factory=list)


def combine(judged: JudgeResult, r_h: float, weights=DEFAULT_WEIGHTS) -> RewardVector:
    weights = tuple(float(w) for w in weights)
    if len(weights) != 4 or any(w < 0 for w in weights):
        raise ValueError(f"weights must be four non-negative numbers, got {weights}")
    return RewardVector(
        r_f=GRADE_VALUES[judged.faithfulness_grade],
        r_s=judged.style_score / 10.0,
        r_a=judged.safety_score / 10.0,
        r_h=r_h,
        weights=weights,  # type: ignore[arg-type]
    )


def compute_reward(
    answer: str,
    evidence: Sequence[str],
    ground_truth: str,
    context: RewardContext,
    clients: RewardClients,
    weights=DEFAULT_WEIGHTS,
) -> RewardReport:
    """Score ``answer`` given evidence texts and the gold answer."""
    urls = extract_urls(answer)
    evidence_urls = extract_urls_from(evidence)
    verdicts = validate_urls(urls, evidence_urls, clients.prefix_pool, clients.checker)
    judged = judge(context.query, context.history, evidence, ground_truth, answer, clients.judge)
    vector = combine(judged, score_url_reward(verdicts), weights)
    return RewardReport(vector, judged, verdicts)
