"""HTTP clients for the external model services (rewriter, embedder, reranker, generator)."""

from __future__ import annotations

import json
from typing import Iterator, Optional, Sequence

import httpx


class ClientError(RuntimeError):
    pass


class _JsonClient:
    def __init__(self, url: str, timeout: float = 5.0, client: Optional[httpx.Client] = None):
        self.url = url
        self._client = client or httpx.Client(timeout=timeout)

    def _post(self, body: dict) -> dict:
        try:
            resp = self._client.post(self.url, json=body)
            resp.raise_for_status()
            return resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise ClientError(f"{self.url}: {exc}") from exc

    def close(self) -> None:
        self._client.close()


class HttpRewriter(_JsonClient):
    """POST {query} -> {rewrites: [..3]}."""

    def rewrite(self, query: str) -> list[str]:
        rewrites = self._post({"query": query}).get("rewrites")
        if not isinstance(rewrites, list):
            raise ClientError("rewriter response has no 'rewrites' list")
        return [str(r) for r in rewrites]


class HttpEmbedder(_JsonClient):
    """POST {text} -> {vector}."""

    def embed(self, text: str) -> list[float]:
        vector = self._post({"text": text}).get("vector")
        if not isinstance(vector, list):
            raise ClientError("embedder response has no 'vector' list")
        return [float(x) for x in vector]


class HttpReranker(_JsonClient):
    """POST {query, passages} -> {scores}."""

    def score(self, query: str, passages: Sequence[str]) -> list[float]:
        scores = self._post({"query": query, "passages": list(passages)}).get("scores")
        if not isinstance(scores, list):
            raise ClientError("reranker response has no 'scores' list")
        return [float(s) for s in scores]


class OpenAIStyleGenerator:
    """Streams from an OpenAI-compatible /chat/completions endpoint."""

    def __init__(self, url: str, model: str, timeout: float = 60.0, temperature: float = 1.0, max_tokens: int = 2048):
        self.url = url
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self._client = httpx.Client(timeout=timeout)

    def messages(self, query: str, history: Sequence[str], evidence: Sequence[str]) -> list[dict]:
        materials = "\n\n".join(f"[{i}] {t}" for i, t in enumerate(evidence, 1))
        msgs = [
            {
                "role": "system",
                "content": "Answer the advertiser's question using only the materials below. "
                "Only cite links that appear in the materials.\n\n" + materials,
            }
        ]
        for i, turn in enumerate(history):
            msgs.append({"role": "user" if i % 2 == 0 else "assistant", "content": turn})
        msgs.append({"role": "user", "content": query})
        return msgs

    def generate(self, query: str, history: Sequence[str], evidence: Sequence[str]) -> Iterator[str]:
        body = {
            "model": self.model,
            "messages": self.messages(query, history, evidence),
            "stream": True,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        try:
            with self._client.stream("POST", self.url, json=body) as resp:
                resp.raise_for_status()
                for line in resp.iter_lines():
                    if not line.startswith("data:"):
                        continue
                    data = line[5:].strip()
                    if data == "[DONE]":
                        break
                    delta = json.loads(data)["choices"][0].get("delta", {}).get("content")
                    if delta:
                        yield delta
        except (httpx.HTTPError, ValueError, KeyError, IndexError) as exc:
            raise ClientError(f"{self.url}: {exc}") from exc
