"""Command-line client.

Workspace commands speak HTTP to the service: to ``--server`` when given
(or COADAPT_SERVER), otherwise to an in-process app over the ``--state``
directory. ``guardrail``, ``train-toy``, ``synth`` and ``eval`` are local
file tools and never need a server.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import httpx

from .corpus import CorpusStore, load_jsonl, write_jsonl
from .evaluation import EvalCase, run_eval, synth_corpus
from .grpo import Environment, TrainConfig, default_environment, train_toy, write_training_log
from .guardrail import Guardrail, evidence_validator
from .orchestrator import OrchestratorConfig
from .pipeline import QAPipeline, build_indexes
from .reward import HttpStatusChecker, StaticStatusChecker, load_prefix_pool
from .stubs import GENERATORS


class ApiError(RuntimeError):
    pass


def _client(args):
    server = args.server or os.environ.get("COADAPT_SERVER")
    if server:
        return httpx.Client(base_url=server, timeout=120.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # starlette's TestClient deprecation notice
        from fastapi.testclient import TestClient

    from .api import create_app
    from .service import Workspace

    return TestClient(create_app(Workspace(args.state)))


def _call(args, method: str, path: str, body: Optional[dict] = None):
    with _client(args) as client:
        resp = client.request(method, path, json=body)
    data = resp.json()
    if resp.status_code >= 400:
        raise ApiError(json.dumps(data.get("error", data)))
    return data


def _print(data) -> None:
    print(json.dumps(data, indent=2, ensure_ascii=False))


def _read_texts(path: str) -> list[str]:
    """Evidence file: JSONL chunk records (``text`` field) or plain text, one chunk per paragraph."""
    raw = Path(path).read_text(encoding="utf-8")
    if path.endswith(".jsonl"):
        return [json.loads(line)["text"] for line in raw.splitlines() if line.strip()]
    return [p.strip() for p in raw.split("\n\n") if p.strip()]


def _checker(args):
    if getattr(args, "live", False):
        return HttpStatusChecker()
    statuses = json.loads(Path(args.http_status).read_text(encoding="utf-8")) if getattr(args, "http_status", None) else {}
    if "http_status" in statuses and isinstance(statuses["http_status"], dict):
        statuses = statuses["http_status"]  # synth meta.json
    return StaticStatusChecker(statuses, default=None)


# --- workspace commands ---------------------------------------------------------


def cmd_serve(args) -> int:
    import uvicorn

    from .api import create_app
    from .service import Workspace

    uvicorn.run(create_app(Workspace(args.state)), host=args.host, port=args.port, log_level=args.log_level)
    return 0


def cmd_ingest(args) -> int:
    _print(_call(args, "POST", "/v1/ingest", {"records": load_jsonl(args.file)}))
    return 0


def cmd_cite(args) -> int:
    _print(_call(args, "POST", "/v1/citations", {"entries": load_jsonl(args.file)}))
    return 0


def cmd_heat_report(args) -> int:
    for row in _call(args, "GET", "/v1/heat")[: args.limit]:
        print(f"{row['chunk_id']}\t{row['count']}")
    return 0


def cmd_snapshot(args) -> int:
    _print(_call(args, "POST", "/v1/snapshot", {"percent": args.percent, "now": args.now}))
    return 0


def cmd_graph(args) -> int:
    if args.graph_cmd == "build":
        _print(_call(args, "POST", "/v1/graph/build"))
    elif args.graph_cmd == "communities":
        _print(_call(args, "GET", "/v1/graph/communities"))
    else:
        _print(_call(args, "POST", "/v1/graph/query", {"query": args.query, "hops": args.hops, "k": args.k}))
    return 0


def cmd_index(args) -> int:
    _print(_call(args, "POST", "/v1/index/build"))
    return 0


def cmd_search(args) -> int:
    for hit in _call(args, "POST", "/v1/search", {"query": args.query, "k": args.k, "channel": args.channel}):
        print(f"{hit['chunk_id']}\t{hit['score']:.6f}")
    return 0


def cmd_retrieve(args) -> int:
    data = _call(args, "POST", "/v1/retrieve", {"query": args.query, "explain": args.explain})
    if not args.explain:
        for item in data["evidence"]:
            print(f"{item['chunk_id']}\t{item['score']:.6f}\t{','.join(item['channels'])}")
        return 0
    print(f"plan: graph={data['plan']['graph']} hybrid={data['plan']['hybrid']}  queries={data['queries']}")
    for name, hits in sorted(data["channels"].items()):
        print(f"[{name}] " + ", ".join(f"{h['chunk_id']}({h['score']:.3f})" for h in hits))
    for row in data["dedup"]:
        tag = "merged" if row["merged"] else "single"
        kept = "kept" if row["kept"] else "dropped"
        print(f"  {row['chunk_id']}\trrf={row['rrf']:.5f}\t{'+'.join(row['channels'])}\t{tag}\t{kept}")
    for ev in data["events"]:
        print(f"  event {ev['stage']}:{ev['kind']} {ev['detail']}")
    print("timings_ms " + json.dumps({k: round(v, 2) for k, v in data["timings_ms"].items()}))
    return 0


def cmd_reward(args) -> int:
    body = {
        "answer": Path(args.answer).read_text(encoding="utf-8").strip(),
        "evidence": _read_texts(args.evidence),
        "ground_truth": Path(args.gt).read_text(encoding="utf-8").strip(),
        "query": args.query,
        "offline": args.offline,
    }
    _print(_call(args, "POST", "/v1/reward", body))
    return 0


def cmd_chat(args) -> int:
    body = {"messages": [{"role": "user", "content": args.query}]}
    with _client(args) as client:
        with client.stream("POST", "/v1/chat", json=body) as resp:
            if resp.status_code >= 400:
                resp.read()
                raise ApiError(resp.text)
            event = None
            for line in resp.iter_lines():
                if line.startswith("event:"):
                    event = line[6:].strip()
                elif line.startswith("data:"):
                    data = json.loads(line[5:])
                    if event == "delta":
                        sys.stdout.write(data["text"])
                        sys.stdout.flush()
                    else:
                        sys.stdout.write("\n")
                        print(json.dumps(data), file=sys.stderr)
    return 0


# --- local tools ---------------------------------------------------------------


def cmd_guardrail(args) -> int:
    pool = load_prefix_pool(args.prefix_pool) if args.prefix_pool else []
    evidence = _read_texts(args.evidence) if args.evidence else []
    blocklist = Path(args.blocklist).read_text(encoding="utf-8").split() if args.blocklist else []
    guard = Guardrail(evidence_validator(evidence, pool, _checker(args)), blocklist)
    state = guard.new_state()
    source = open(args.input, encoding="utf-8") if args.input else sys.stdin
    try:
        while True:
            chunk = source.read(args.chunk_size) if args.chunk_size else source.readline()
            if not chunk:
                break
            out, state = guard.scan_chunk(state, chunk)
            sys.stdout.write(out)
            sys.stdout.flush()
        sys.stdout.write(guard.finalize(state))
        sys.stdout.flush()
    finally:
        if args.input:
            source.close()
    if args.events:
        write_jsonl(args.events, (e.as_dict() for e in state.events))
    return 0


def cmd_train_toy(args) -> int:
    data = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    env = Environment.from_dict(data["environment"]) if "environment" in data else default_environment()
    if args.environment:
        env = Environment.load(args.environment)
    overrides = {k: v for k, v in data.items() if k != "environment"}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    result = train_toy(TrainConfig.from_mapping(overrides), env)
    write_training_log(result.curve, args.log)
    _print(result.report())
    return 0


def cmd_synth(args) -> int:
    corpus = synth_corpus(args.seed, args.size, args.hop_fraction)
    paths = corpus.write(args.out)
    _print({"files": paths, "chunks": len(corpus.chunks), "cases": len(corpus.cases), "percent": corpus.percent})
    return 0


def cmd_eval(args) -> int:
    store = CorpusStore()
    store.ingest_chunks(load_jsonl(args.corpus))
    if args.citations:
        store.replay_citations(load_jsonl(args.citations))
    if args.percent is not None:
        store.rolling_update(args.percent)
    pool = load_prefix_pool(args.prefix_pool) if args.prefix_pool else []
    checker = _checker(args)
    overrides = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    pipeline = QAPipeline(
        store,
        build_indexes(store),
        GENERATORS[args.generator](),
        prefix_pool=pool,
        checker=checker,
        config=OrchestratorConfig.from_mapping(overrides),
    )
    cases = [EvalCase.from_record(r) for r in load_jsonl(args.cases)]
    rows, summary = run_eval(pipeline, cases, checker)
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "results.jsonl", (r.to_record() for r in rows))
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _print(summary)
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coadapt", description="Retrieval, reward and guardrail toolkit for support QA.")
    p.add_argument("--state", default=os.environ.get("COADAPT_STATE", ".coadapt"), help="workspace directory")
    p.add_argument("--server", default=None, help="base URL of a running service (default: in-process)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--log-level", default="info")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("ingest", help="ingest a corpus JSONL file")
    s.add_argument("file")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("cite", help="replay a citation log JSONL file")
    s.add_argument("file")
    s.set_defaults(func=cmd_cite)

    s = sub.add_parser("heat-report", help="chunks by citation heat")
    s.add_argument("--limit", type=int, default=None)
    s.set_defaults(func=cmd_heat_report)

    s = sub.add_parser("snapshot", help="roll the window and publish the top-N%% snapshot")
    s.add_argument("--percent", type=int, required=True)
    s.add_argument("--now", default=None, help="timestamp (epoch or ISO-8601)")
    s.set_defaults(func=cmd_snapshot)

    s = sub.add_parser("graph", help="knowledge graph commands")
    gsub = s.add_subparsers(dest="graph_cmd", required=True)
    gsub.add_parser("build")
    gsub.add_parser("communities")
    q = gsub.add_parser("query")
    q.add_argument("query")
    q.add_argument("--hops", type=int, default=2)
    q.add_argument("--k", type=int, default=10)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("index", help="hybrid index commands")
    isub = s.add_subparsers(dest="index_cmd", required=True)
    isub.add_parser("build")
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("search", help="lexical, dense or hybrid search")
    s.add_argument("query")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--channel", choices=["lexical", "dense", "hybrid"], default="hybrid")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("retrieve", help="full parallel retrieval")
    s.add_argument("query")
    s.add_argument("--explain", action="store_true")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("chat", help="stream an answer from /v1/chat")
    s.add_argument("query")
    s.set_defaults(func=cmd_chat)

    s = sub.add_parser("reward", help="score an answer")
    s.add_argument("--answer", required=True)
    s.add_argument("--evidence", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--query", default="")
    s.add_argument("--offline", action="store_true", help="stub judge and offline status table")
    s.set_defaults(func=cmd_reward)

    s = sub.add_parser("guardrail", help="filter a text stream (stdin to stdout)")
    s.add_argument("--evidence", default=None)
    s.add_argument("--prefix-pool", default=None)
    s.add_argument("--blocklist", default=None, help="file of whitespace-separated terms")
    s.add_argument("--http-status", default=None, help="JSON URL->status table for offline checks")
    s.add_argument("--live", action="store_true", help="probe URLs over HTTP")
    s.add_argument("--events", default=None, help="write guardrail events JSONL here")
    s.add_argument("--input", default=None)
    s.add_argument("--chunk-size", type=int, default=0, help="read fixed-size chunks instead of lines")
    s.set_defaults(func=cmd_guardrail)

    s = sub.add_parser("train-toy", help="desk-scale GRPO on the toy template policy")
    s.add_argument("--config", default=None, help="JSON: TrainConfig fields, optional 'environment'")
    s.add_argument("--environment", default=None, help="environment JSON file")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--log", default="training_log.csv")
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("synth", help="generate a synthetic multi-hop corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=100)
    s.add_argument("--hop-fraction", type=float, default=0.5)
    s.add_argument("--out", default="synth")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", help="run the QA pipeline over eval cases")
    s.add_argument("--corpus", required=True)
    s.add_argument("--cases", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--citations", default=None)
    s.add_argument("--percent", type=int, default=None)
    s.add_argument("--prefix-pool", default=None)
    s.add_argument("--http-status", default=None)
    s.add_argument("--live", action="store_true")
    s.add_argument("--generator", choices=sorted(GENERATORS), default="faithful-echo")
    s.add_argument("--config", default=None, help="JSON orchestrator overrides")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ApiError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
