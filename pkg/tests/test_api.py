import json

import pytest
from fastapi.testclient import TestClient

from coadapt.api import create_app
from coadapt.evaluation import synth_corpus
from coadapt.service import VERSION, Settings, Workspace


def parse_sse(body: str) -> list[tuple[str, dict]]:
    events = []
    for frame in body.strip().split("\n\n"):
        lines = dict(line.split(": ", 1) for line in frame.splitlines())
        events.append((lines["event"], json.loads(lines["data"])))
    return events


@pytest.fixture
def synth():
    return synth_corpus(0, 20, 0.5)


def _client(tmp_path, synth, **settings):
    base = dict(prefix_pool=synth.prefix_pool, http_status=synth.http_status, percent=synth.percent)
    base.update(settings)
    ws = Workspace(tmp_path / "ws", Settings.from_mapping(base))
    client = TestClient(create_app(ws))
    assert client.post("/v1/ingest", json={"records": synth.chunks}).status_code == 200
    assert client.post("/v1/citations", json={"entries": synth.citations}).json() == {"recorded": len(synth.citations)}
    return client


def _chat(client, query, **extra):
    return client.post("/v1/chat", json={"messages": [{"role": "user", "content": query}], **extra})


def test_healthz(tmp_path):
    client = TestClient(create_app(Workspace(tmp_path)))
    body = client.get("/healthz").json()
    assert body["status"] == "ok" and body["version"] == VERSION


def test_chat_streams_deltas_then_done(tmp_path, synth):
    client = _client(tmp_path, synth)
    resp = _chat(client, synth.cases[0].query)
    assert resp.status_code == 200
    assert resp.headers["content-type"].startswith("text/event-stream")
    events = parse_sse(resp.text)
    kinds = [k for k, _ in events]
    assert kinds[-1] == "done" and kinds.count("done") == 1
    assert kinds[:-1] and set(kinds[:-1]) == {"delta"}
    meta = events[-1][1]
    assert meta["evidence_ids"] and "generation" in meta["timings_ms"]


def test_chat_redacts_fabricated_links(tmp_path, synth):
    client = _client(tmp_path, synth, generator="url-fabricator")
    texts = []
    for case in synth.cases[:10]:
        events = parse_sse(_chat(client, case.query).text)
        texts.append("".join(d["text"] for k, d in events if k == "delta"))
    assert any("[link removed]" in t for t in texts)
    assert not any("adsphere-support" in t for t in texts)


@pytest.mark.parametrize(
    "body",
    [
        {},
        {"messages": []},
        {"messages": [{"role": "user", "content": "  "}]},
        {"messages": [{"role": "user", "content": "hi"}, {"role": "assistant", "content": "yo"}]},
        {"messages": [{"role": "robot", "content": "hi"}]},
    ],
)
def test_chat_malformed_body(tmp_path, body):
    client = TestClient(create_app(Workspace(tmp_path)))
    resp = client.post("/v1/chat", json=body)
    assert resp.status_code == 400
    assert resp.json()["error"]["code"] == "invalid_request"


def test_chat_generator_unavailable(tmp_path, synth):
    client = _client(tmp_path, synth, generator={"url": "http://127.0.0.1:9/v1/chat/completions"})
    resp = _chat(client, synth.cases[0].query)
    assert resp.status_code == 503
    body = resp.json()["error"]
    assert body["code"] == "generator_unavailable" and "timings_ms" in body


def test_ingest_errors(tmp_path):
    client = TestClient(create_app(Workspace(tmp_path)))
    resp = client.post("/v1/ingest", json={"records": [{"id": "a", "text": "x"}, {"id": "b"}]})
    assert resp.status_code == 400 and resp.json()["error"]["code"] == "malformed_record"
    resp = client.post("/v1/citations", json={"entries": [{"chunk_id": "ghost", "ts": 0}]})
    assert resp.status_code == 404 and resp.json()["error"]["code"] == "unknown_chunk"


def test_corpus_graph_and_index_endpoints(tmp_path, synth):
    client = _client(tmp_path, synth)
    heat = client.get("/v1/heat").json()
    assert heat[0]["count"] == 3
    snap = client.post("/v1/snapshot", json={"percent": synth.percent, "now": 1_767_300_000}).json()
    assert len(snap["chunk_ids"]) >= 20
    assert client.post("/v1/snapshot", json={"percent": 101}).status_code == 400
    built = client.post("/v1/graph/build").json()
    assert built["entities"] > 0 and built["snapshot_size"] == len(snap["chunk_ids"])
    assert (tmp_path / "ws" / "graph.json").exists()
    comms = client.get("/v1/graph/communities").json()
    assert len(comms["levels"]) == 2
    entity = synth.cases[0].query.split()[-1].rstrip("?")
    graph_hits = client.post("/v1/graph/query", json={"query": entity}).json()
    assert graph_hits["seeds"] == [entity.lower()] and graph_hits["results"]
    assert client.post("/v1/index/build").json()["documents"] == len(synth.chunks)
    hits = client.post("/v1/search", json={"query": synth.cases[0].query, "channel": "lexical"}).json()
    assert hits and hits[0]["channel"] == "lexical"
    assert client.post("/v1/search", json={"query": "x", "channel": "sparse"}).status_code == 400


def test_retrieve_explain(tmp_path, synth):
    client = _client(tmp_path, synth)
    out = client.post("/v1/retrieve", json={"query": synth.cases[0].query, "explain": True}).json()
    assert {"evidence", "plan", "queries", "channels", "dedup", "timings_ms"} <= set(out)
    assert all(row["kept"] == (row["chunk_id"] in {e["chunk_id"] for e in out["evidence"]}) for row in out["dedup"])


def test_reward_and_guardrail_endpoints(tmp_path, synth):
    client = _client(tmp_path, synth)
    case = synth.cases[0]
    reward = client.post("/v1/reward", json={"answer": case.gold_answer, "evidence": [case.gold_answer], "ground_truth": case.gold_answer}).json()
    assert reward["r_h"] == 1.0 and reward["grade"] == "G"
    guarded = client.post("/v1/guardrail", json={"text": "see https://fake.example/x now"}).json()
    assert guarded["text"] == "see [link removed] now"
    assert guarded["events"][0]["kind"] == "url_redacted"


def test_workspace_state_survives_restart(tmp_path, synth):
    client = _client(tmp_path, synth)
    client.post("/v1/snapshot", json={"percent": synth.percent, "now": 1_767_300_000})
    again = TestClient(create_app(Workspace(tmp_path / "ws", Settings.from_mapping({"percent": synth.percent}))))
    assert again.get("/healthz").json()["chunks"] == len(synth.chunks)
    assert again.get("/healthz").json()["active_snapshot"] is not None


def test_settings_reject_unknown_keys():
    with pytest.raises(ValueError):
        Settings.from_mapping({"nope": 1})
