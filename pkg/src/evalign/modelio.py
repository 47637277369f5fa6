"""Wire-protocol client for generation and judge endpoints.

A request is a single JSON object:

    {"segments": [{"type": "image"|"text", "value": <locator-or-string>}, ...],
     "params": {"max_new_tokens": int, "decoding": "greedy"|"sample",
                "temperature": float|null, "top_p": float|null,
                "stop": [str, ...], "seed": int|null}}

and the response is {"text": str, "usage": {...}}. Images travel by locator;
the endpoint fetches and decodes them. Payloads are UTF-8 JSON.
"""

from __future__ import annotations

import json
import re
import threading
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import requests

from evalign.errors import (
    CapacityError,
    EndpointError,
    JudgeProtocolError,
    ProtocolError,
)
from evalign.promptkit import InterleavedPrompt, text_segment

DEFAULT_TIMEOUT_S = 30.0

# Output-genre defaults: short answers for VQA/matching, a sentence or two for
# captions and explanations, long form for instruction following.
MAX_NEW_TOKENS_DEFAULTS = {
    "hallucination": 64,
    "explainability": 64,
    "abstention": 10,
    "compositionality": 10,
    "instruction": 512,
}


@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int = 64
    decoding: str = "greedy"  # "greedy" | "sample"
    temperature: float | None = None
    top_p: float | None = None
    stop_sequences: tuple[str, ...] = ()
    seed: int | None = None

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.decoding not in ("greedy", "sample"):
            raise ValueError(f"unknown decoding mode {self.decoding!r}")
        if self.decoding == "sample" and not (self.temperature and self.temperature > 0):
            raise ValueError("sampling requires temperature > 0")

    def to_wire(self) -> dict:
        return {
            "max_new_tokens": self.max_new_tokens,
            "decoding": self.decoding,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "stop": list(self.stop_sequences),
            "seed": self.seed,
        }


@dataclass(frozen=True)
class GenerationExchange:
    """One request/response pair; output is the raw, untruncated model text."""

    prompt: InterleavedPrompt
    params: GenerationParams
    output: str
    latency: float
    endpoint_id: str


@dataclass(frozen=True)
class JudgeVerdict:
    score: float
    rationale: str
    reference_score: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 10.0:
            raise JudgeProtocolError(f"judge score {self.score} outside [0, 10]")


def request_payload(prompt: InterleavedPrompt, params: GenerationParams) -> dict:
    segments = []
    for seg in prompt.segments:
        if seg.kind == "image":
            segments.append({"type": "image", "value": seg.payload.uri})
        else:
            segments.append({"type": "text", "value": seg.payload})
    return {"segments": segments, "params": params.to_wire()}


class EndpointClient:
    """Thread-safe client with bounded in-flight requests and idempotent retries."""

    def __init__(
        self,
        endpoint: str,
        max_inflight: int = 4,
        retry_budget: int = 2,
        timeout: float = DEFAULT_TIMEOUT_S,
        bearer_token: str | None = None,
    ):
        if max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")
        self.endpoint = endpoint
        self.max_inflight = max_inflight
        self.retry_budget = retry_budget
        self.timeout = timeout
        self._headers = {"Content-Type": "application/json"}
        if bearer_token:
            self._headers["Authorization"] = f"Bearer {bearer_token}"
        self._slots = threading.BoundedSemaphore(max_inflight)

    def generate(self, prompt: InterleavedPrompt, params: GenerationParams) -> GenerationExchange:
        payload = json.dumps(request_payload(prompt, params)).encode("utf-8")
        start = time.monotonic()
        last_error: Exception | None = None
        for attempt in range(self.retry_budget + 1):
            if attempt:
                time.sleep(0.05 * 2 ** (attempt - 1))
            with self._slots:
                try:
                    resp = requests.post(
                        self.endpoint, data=payload, headers=self._headers, timeout=self.timeout
                    )
                except requests.RequestException as exc:
                    last_error = exc
                    continue
            if resp.status_code == 413:
                raise CapacityError(
                    f"endpoint rejected oversize prompt "
                    f"({prompt.image_count()} image segments): {resp.text[:200]}",
                    shots=max(prompt.image_count() - 1, 0),
                )
            if resp.status_code >= 500:
                last_error = EndpointError(f"server error {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ProtocolError(f"endpoint returned {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
            except ValueError as exc:
                raise ProtocolError(f"endpoint reply is not JSON: {exc}") from exc
            if not isinstance(body, dict) or "text" not in body:
                raise ProtocolError(f"endpoint reply missing 'text': {body!r}")
            return GenerationExchange(
                prompt=prompt,
                params=params,
                output=str(body["text"]),
                latency=time.monotonic() - start,
                endpoint_id=self.endpoint,
            )
        raise EndpointError(
            f"endpoint {self.endpoint} unreachable after {self.retry_budget + 1} attempts: "
            f"{last_error}"
        )


_SCORE_RE = re.compile(r"-?\d+(?:\.\d+)?")


def load_judge_template(path: str | Path | None = None) -> str:
    if path is None:
        return resources.files("evalign.data").joinpath("judge_prompt.txt").read_text(
            encoding="utf-8"
        )
    return Path(path).read_text(encoding="utf-8")


class JudgeClient:
    """Scores a response against a ground truth via a judge endpoint.

    The judge prompt shape (instruction + reference + response -> one numeric
    score) lives in a template data file, not code.
    """

    def __init__(self, client: EndpointClient, template: str | None = None):
        self.client = client
        self.template = template if template is not None else load_judge_template()

    def judge(self, response: str, ground_truth: str, instruction: str) -> JudgeVerdict:
        rendered = (
            self.template.replace("{instruction}", instruction)
            .replace("{reference}", ground_truth)
            .replace("{response}", response)
        )
        prompt = InterleavedPrompt(segments=(text_segment(rendered),))
        exchange = self.client.generate(
            prompt, GenerationParams(max_new_tokens=64, decoding="greedy")
        )
        match = _SCORE_RE.search(exchange.output)
        if match is None:
            raise JudgeProtocolError(f"no score in judge reply: {exchange.output[:200]!r}")
        score = float(match.group())
        if not 0.0 <= score <= 10.0:
            raise JudgeProtocolError(f"judge score {score} outside [0, 10]")
        return JudgeVerdict(score=score, rationale=exchange.output)
