from typing import Any, Literal, Optional

from pydantic import BaseModel, Field, field_validator


class ErrorBody(BaseModel):
    code: str
    message: str


class ErrorResponse(BaseModel):
    error: ErrorBody


class HealthResponse(BaseModel):
    status: str
    version: str
    chunks: int
    active_snapshot: Optional[int] = None
    generator: str


class Message(BaseModel):
    role: Literal["system", "user", "assistant"]
    content: str


class ChatRequest(BaseModel):
    """Chat-style body; the last user message is the query, earlier turns are history."""

    messages: list[Message] = Field(min_length=1)
    config: dict[str, Any] = Field(default_factory=dict)

    @field_validator("messages")
    @classmethod
    def _ends_with_user(cls, messages: list[Message]) -> list[Message]:
        if messages[-1].role != "user" or not messages[-1].content.strip():
            raise ValueError("last message must be a non-empty user turn")
        return messages

    @property
    def query(self) -> str:
        return self.messages[-1].content

    @property
    def history(self) -> list[str]:
        return [m.content for m in self.messages[:-1] if m.role != "system"]


class IngestRequest(BaseModel):
    records: list[dict[str, Any]]


class IngestResponse(BaseModel):
    added: int
    replaced: int
    total: int


class Citation(BaseModel):
    chunk_id: str
    ts: Any


class CitationsRequest(BaseModel):
    entries: list[Citation]


class HeatEntry(BaseModel):
    chunk_id: str
    count: int
    window_start: float


class SnapshotRequest(BaseModel):
    percent: int = Field(ge=0, le=100)
    now: Any = None


class SnapshotResponse(BaseModel):
    chunk_ids: list[str]
    percent: int
    created_at: float


class GraphQueryRequest(BaseModel):
    query: str = Field(min_length=1)
    hops: int = Field(default=2, ge=1)
    k: int = Field(default=10, ge=1)


class SearchRequest(BaseModel):
    query: str = Field(min_length=1)
    k: int = Field(default=10, ge=1)
    channel: Literal["lexical", "dense", "hybrid"] = "hybrid"


class SearchHit(BaseModel):
    chunk_id: str
    score: float
    channel: str


class RetrieveRequest(BaseModel):
    query: str = Field(min_length=1)
    explain: bool = False
    config: dict[str, Any] = Field(default_factory=dict)


class RewardRequest(BaseModel):
    answer: str
    evidence: list[str] = Field(default_factory=list)
    ground_truth: str
    query: str = ""
    offline: bool = True


class GuardrailRequest(BaseModel):
    text: str
    evidence: list[str] = Field(default_factory=list)
