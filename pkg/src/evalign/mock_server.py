"""Deterministic scripted endpoint speaking the wire protocol, for tests.

A behavior script is a JSON document:

    {"default": <rule>, "rules": [<rule>, ...]}

Each rule is an object with a "kind" and optional matchers. Rules are tried
in order against the request's query text (the last text segment); the first
match fires, else the default. Matchers: "match" (substring), "pattern"
(regex, compiled at load), "table" key presence for lookups. Kinds:

    fixed        -> {"kind": "fixed", "text": "..."}
    echo         -> last text segment
    echo_prompt  -> all segments rendered with image_marker (wire round trips)
    lookup       -> {"kind": "lookup", "table": {"query text": "reply"}}
    judge_exact  -> "10" when the Reference:/Response: lines match, else "3"

Rules may also set "delay_ms" (serving latency), "fail_times" (serve that
many 500s before succeeding) and "status" (force an HTTP status).
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from time import sleep
from typing import Mapping

from evalign.errors import MockScriptError

_KINDS = ("fixed", "echo", "echo_prompt", "lookup", "judge_exact")
_JUDGE_FIELDS = re.compile(r"Reference: (.*)\nResponse: (.*)\n")

# guards scripted failure countdowns against concurrent handlers
_FAIL_LOCK = threading.Lock()


@dataclass
class MockRule:
    kind: str
    match: str | None = None
    pattern: re.Pattern | None = None
    text: str = ""
    table: Mapping[str, str] = field(default_factory=dict)
    image_marker: str = "<image>"
    delay_ms: int = 0
    fail_times: int = 0
    status: int = 200
    _failures_left: int = 0

    def __post_init__(self):
        self._failures_left = self.fail_times

    def matches(self, query_text: str) -> bool:
        if self.match is not None:
            return self.match in query_text
        if self.pattern is not None:
            return self.pattern.search(query_text) is not None
        if self.kind == "lookup":
            return query_text in self.table
        return True

    def reply(self, segments: list[dict], query_text: str) -> str:
        if self.kind == "fixed":
            return self.text
        if self.kind == "echo":
            return query_text
        if self.kind == "echo_prompt":
            return "".join(
                self.image_marker if s["type"] == "image" else s["value"] for s in segments
            )
        if self.kind == "lookup":
            return self.table[query_text]
        if self.kind == "judge_exact":
            found = _JUDGE_FIELDS.search(query_text)
            if found and found.group(1) == found.group(2):
                return "10"
            return "3"
        raise MockScriptError(f"unhandled kind {self.kind!r}")


@dataclass
class MockScript:
    default: MockRule
    rules: list[MockRule]

    def route(self, segments: list[dict]) -> MockRule:
        query_text = ""
        for seg in reversed(segments):
            if seg["type"] == "text":
                query_text = seg["value"]
                break
        for rule in self.rules:
            if rule.matches(query_text):
                return rule
        return self.default

    @staticmethod
    def query_text(segments: list[dict]) -> str:
        for seg in reversed(segments):
            if seg["type"] == "text":
                return seg["value"]
        return ""


def _parse_rule(raw: dict, where: str) -> MockRule:
    if not isinstance(raw, dict):
        raise MockScriptError(f"{where}: rule must be an object")
    kind = raw.get("kind")
    if kind not in _KINDS:
        raise MockScriptError(f"{where}: unknown kind {kind!r}")
    pattern = None
    if "pattern" in raw:
        try:
            pattern = re.compile(raw["pattern"])
        except re.error as exc:
            raise MockScriptError(f"{where}: bad regex {raw['pattern']!r}: {exc}") from exc
    if kind == "fixed" and "text" not in raw:
        raise MockScriptError(f"{where}: fixed rule needs 'text'")
    if kind == "lookup" and not isinstance(raw.get("table"), dict):
        raise MockScriptError(f"{where}: lookup rule needs a 'table' object")
    return MockRule(
        kind=kind,
        match=raw.get("match"),
        pattern=pattern,
        text=str(raw.get("text", "")),
        table=raw.get("table", {}),
        image_marker=str(raw.get("image_marker", "<image>")),
        delay_ms=int(raw.get("delay_ms", 0)),
        fail_times=int(raw.get("fail_times", 0)),
        status=int(raw.get("status", 200)),
    )


def load_mock_script(source: str | Path | Mapping) -> MockScript:
    if isinstance(source, Mapping):
        doc = source
    else:
        try:
            doc = json.loads(Path(source).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise MockScriptError(f"script is not valid JSON: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise MockScriptError("script must be a JSON object")
    default = _parse_rule(doc.get("default", {"kind": "echo"}), "default")
    rules = [_parse_rule(r, f"rules[{i}]") for i, r in enumerate(doc.get("rules", []))]
    return MockScript(default=default, rules=rules)


class _Stats:
    def __init__(self):
        self._lock = threading.Lock()
        self.requests = 0
        self.inflight = 0
        self.max_inflight = 0

    def enter(self):
        with self._lock:
            self.requests += 1
            self.inflight += 1
            self.max_inflight = max(self.max_inflight, self.inflight)

    def leave(self):
        with self._lock:
            self.inflight -= 1

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "requests": self.requests,
                "inflight": self.inflight,
                "max_inflight": self.max_inflight,
            }


class _Handler(BaseHTTPRequestHandler):
    script: MockScript
    stats: _Stats

    def log_message(self, *args):  # keep test output quiet
        pass

    def _send(self, status: int, body: dict):
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path == "/stats":
            self._send(200, self.stats.snapshot())
        else:
            self._send(404, {"error": "not found"})

    def do_POST(self):
        self.stats.enter()
        try:
            length = int(self.headers.get("Content-Length", 0))
            try:
                body = json.loads(self.rfile.read(length).decode("utf-8"))
                segments = body["segments"]
                assert isinstance(segments, list)
                for seg in segments:
                    assert seg["type"] in ("image", "text")
                    assert isinstance(seg["value"], str)
            except (ValueError, KeyError, AssertionError, TypeError):
                self._send(400, {"error": "malformed request"})
                return
            rule = self.script.route(segments)
            if rule.delay_ms:
                sleep(rule.delay_ms / 1000.0)
            with _FAIL_LOCK:
                should_fail = rule._failures_left > 0
                if should_fail:
                    rule._failures_left -= 1
            if should_fail:
                self._send(500, {"error": "scripted transient failure"})
                return
            if rule.status != 200:
                self._send(rule.status, {"error": f"scripted status {rule.status}"})
                return
            text = rule.reply(segments, MockScript.query_text(segments))
            self._send(200, {"text": text, "usage": {"segments": len(segments)}})
        finally:
            self.stats.leave()


@dataclass
class MockServerHandle:
    server: ThreadingHTTPServer
    thread: threading.Thread
    stats: _Stats

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}/v1/generate"

    def snapshot(self) -> dict:
        return self.stats.snapshot()

    def stop(self):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)

    def __enter__(self) -> "MockServerHandle":
        return self

    def __exit__(self, *exc):
        self.stop()


def serve_mock(script: str | Path | Mapping | MockScript, port: int = 0) -> MockServerHandle:
    """Start the scripted server on localhost; port 0 picks a free port."""
    if not isinstance(script, MockScript):
        script = load_mock_script(script)
    stats = _Stats()
    handler = type("BoundHandler", (_Handler,), {"script": script, "stats": stats})
    server = ThreadingHTTPServer(("127.0.0.1", port), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return MockServerHandle(server=server, thread=thread, stats=stats)
