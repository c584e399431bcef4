"""FastAPI service over a workspace: streaming chat plus the corpus, graph and index operations."""

from __future__ import annotations

import itertools
import json
import logging
import os
from typing import Iterator, Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, StreamingResponse

from ..corpus import CorpusError, UnknownChunk
from ..guardrail import Guardrail, evidence_validator
from ..reward import JudgeError
from ..service import VERSION, Workspace
from .schemas import (
    ChatRequest,
    CitationsRequest,
    GraphQueryRequest,
    GuardrailRequest,
    HealthResponse,
    HeatEntry,
    IngestRequest,
    IngestResponse,
    RetrieveRequest,
    RewardRequest,
    SearchHit,
    SearchRequest,
    SnapshotRequest,
    SnapshotResponse,
)

log = logging.getLogger(__name__)


def _error(status: int, code: str, message: str, **extra) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message, **extra}})


def sse(event: str, data: dict) -> str:
    return f"event: {event}\ndata: {json.dumps(data, ensure_ascii=False)}\n\n"


def create_app(workspace: Workspace) -> FastAPI:
    app = FastAPI(title="coadapt", version=VERSION)
    app.state.workspace = workspace

    @app.exception_handler(RequestValidationError)
    async def _invalid(request: Request, exc: RequestValidationError):
        return _error(400, "invalid_request", "request body failed validation", details=json.loads(json.dumps(exc.errors(), default=str)))

    @app.exception_handler(UnknownChunk)
    async def _unknown(request: Request, exc: UnknownChunk):
        return _error(404, "unknown_chunk", str(exc))

    @app.exception_handler(CorpusError)
    async def _corpus(request: Request, exc: CorpusError):
        return _error(400, "malformed_record", str(exc))

    @app.exception_handler(JudgeError)
    async def _judge(request: Request, exc: JudgeError):
        return _error(502, "judge_unavailable", str(exc))

    @app.exception_handler(ValueError)
    async def _value(request: Request, exc: ValueError):
        return _error(400, "invalid_request", str(exc))

    @app.get("/healthz", response_model=HealthResponse)
    def healthz():
        return workspace.health()

    @app.post("/v1/chat")
    def chat(body: ChatRequest):
        events = workspace.pipeline.stream(body.query, body.history, body.config or None)
        first = next(events)
        if first[0] == "error":
            return _error(503, "generator_unavailable", "generator failed before producing output", **first[1].metadata())

        def frames(head: tuple[str, object], rest: Iterator[tuple[str, object]]) -> Iterator[str]:
            for kind, payload in itertools.chain([head], rest):
                if kind == "delta":
                    yield sse("delta", {"text": payload})
                elif kind == "done":
                    yield sse("done", payload.metadata())  # type: ignore[attr-defined]
                else:
                    yield sse("error", {"code": "generator_unavailable", **payload.metadata()})  # type: ignore[attr-defined]

        return StreamingResponse(frames(first, events), media_type="text/event-stream", headers={"Cache-Control": "no-cache"})

    @app.post("/v1/ingest", response_model=IngestResponse)
    def ingest(body: IngestRequest):
        return workspace.ingest(body.records)

    @app.post("/v1/citations")
    def citations(body: CitationsRequest):
        return workspace.cite([e.model_dump() for e in body.entries])

    @app.get("/v1/heat", response_model=list[HeatEntry])
    def heat():
        return workspace.heat_report()

    @app.post("/v1/snapshot", response_model=SnapshotResponse)
    def snapshot(body: SnapshotRequest):
        return workspace.snapshot(body.percent, body.now)

    @app.post("/v1/graph/build")
    def graph_build():
        return workspace.build_graph()

    @app.get("/v1/graph/communities")
    def graph_communities():
        return workspace.communities()

    @app.post("/v1/graph/query")
    def graph_query(body: GraphQueryRequest):
        return workspace.graph_query(body.query, body.hops, body.k)

    @app.post("/v1/index/build")
    def index_build():
        return workspace.build_index()

    @app.post("/v1/search", response_model=list[SearchHit])
    def search(body: SearchRequest):
        return workspace.search(body.query, body.k, body.channel)

    @app.post("/v1/retrieve")
    def retrieve(body: RetrieveRequest):
        return workspace.retrieve(body.query, body.explain, body.config or None)

    @app.post("/v1/reward")
    def reward(body: RewardRequest):
        return workspace.reward(body.answer, body.evidence, body.ground_truth, body.query, body.offline)

    @app.post("/v1/guardrail")
    def guardrail(body: GuardrailRequest):
        s = workspace.settings
        guard = Guardrail(evidence_validator(body.evidence, s.pool(), s.checker()), s.blocklist)
        text, events = guard.apply(body.text)
        return {"text": text, "events": [e.as_dict() for e in events]}

    return app


def app_from_env() -> FastAPI:
    """Factory for ``uvicorn --factory``; the workspace path comes from COADAPT_STATE."""
    return create_app(Workspace(os.environ.get("COADAPT_STATE", ".coadapt")))
