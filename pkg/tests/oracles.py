"""Reference implementations written independently of the package, for equivalence tests."""

import math
import re
import statistics
from fractions import Fraction
from functools import lru_cache


def url_valid_oracle(in_evidence: bool, prefix_ok: bool, status) -> bool:
    # line-by-line reading of the validity rule: evidence wins, else prefix and live status
    if in_evidence:
        return True
    if not prefix_ok:
        return False
    return status in (200, 301, 302)


def url_reward_oracle(flags) -> float:
    if len(flags) == 0:
        return 0.0
    good = len([f for f in flags if f])
    bad = len(flags) - good
    return (good - bad) / len(flags)


def ascii_tokens(text: str) -> list:
    return re.sub(r"[^a-z0-9]+", " ", text.lower()).split()


def bm25_oracle(query: str, docs: dict, k1: float = 1.2, b: float = 0.75) -> dict:
    """Brute force: score every document for every distinct query term."""
    toks = {d: ascii_tokens(t) for d, t in docs.items()}
    n = len(docs)
    avgdl = sum(len(t) for t in toks.values()) / n
    out = {}
    for d, words in toks.items():
        total = 0.0
        for term in set(ascii_tokens(query)):
            tf = words.count(term)
            if tf == 0:
                continue
            df = sum(1 for w in toks.values() if term in w)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            total += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(words) / avgdl))
        if total > 0:
            out[d] = total
    return out


def lcs_oracle(a: list, b: list) -> int:
    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> int:
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    a, b = tuple(a), tuple(b)
    return go(0, 0)


def lcs_table(a: list, b: list) -> int:
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            t[i][j] = t[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1] else max(t[i - 1][j], t[i][j - 1])
    return t[len(a)][len(b)]


def rouge_oracle(cand: str, ref: str) -> float:
    c, r = cand.split(), ref.split()
    if not c or not r:
        return 0.0
    lcs = lcs_table(c, r)
    if lcs == 0:
        return 0.0
    # exact rationals, rounded once at the end
    p, rc = Fraction(lcs, len(c)), Fraction(lcs, len(r))
    return float(100 * (2 * p * rc) / (p + rc))


def advantages_oracle(rewards) -> list:
    mu = statistics.fmean(rewards)
    sd = statistics.pstdev(rewards)
    if sd == 0:
        return [0.0] * len(rewards)
    return [(x - mu) / sd for x in rewards]


def top_percent_oracle(items: list, percent: int) -> list:
    """items: (id, heat, updated_at). Sort by heat desc, recency desc, id asc; keep ceil(p*n/100)."""
    k = math.ceil(percent * len(items) / 100)
    ranked = sorted(items, key=lambda x: x[0])
    ranked = sorted(ranked, key=lambda x: x[2], reverse=True)
    ranked = sorted(ranked, key=lambda x: x[1], reverse=True)
    return [x[0] for x in ranked[:k]]


def central_difference(f, x, h: float = 1e-6):
    import numpy as np

    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (f(up) - f(down)) / (2 * h)
    return grad
