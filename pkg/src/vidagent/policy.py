"""Policies the episode loop can drive, plus the chat-completions judge client.

Three policies are provided: :class:`ScriptedPolicy` for tests,
:class:`ReplayPolicy` for re-running logged trajectories, and
:class:`RemotePolicy` for any chat-completions endpoint.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Callable, Iterable, Protocol

import httpx

from vidagent.assets import load_asset

if TYPE_CHECKING:
    from vidagent.environment import FrameSet

log = logging.getLogger(__name__)

ENV_ENDPOINT = "VIDAGENT_ENDPOINT"
ENV_MODEL = "VIDAGENT_MODEL"
ENV_API_KEY = "VIDAGENT_API_KEY"
ENV_JUDGE_ENDPOINT = "VIDAGENT_JUDGE_ENDPOINT"
ENV_JUDGE_MODEL = "VIDAGENT_JUDGE_MODEL"
ENV_JUDGE_API_KEY = "VIDAGENT_JUDGE_API_KEY"


class PolicyError(RuntimeError):
    """Base class for anything that prevents a policy from producing a turn."""


class PolicyTransportError(PolicyError):
    pass


class ContextOverflow(PolicyError):
    pass


class ScriptExhausted(PolicyError):
    pass


class JudgeUnavailable(RuntimeError):
    pass


class UnparseableVerdict(ValueError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    text: str
    frames: FrameSet | None = None


@dataclass(frozen=True)
class PolicyTurnRequest:
    conversation: tuple[Message, ...]


@dataclass(frozen=True)
class PolicyTurnResponse:
    raw_text: str
    logprobs: tuple[float, ...] | None = None
    retries: int = 0

    def __post_init__(self) -> None:
        if not self.raw_text:
            raise ValueError("policy produced an empty turn")


class Policy(Protocol):
    def next_turn(self, request: PolicyTurnRequest) -> PolicyTurnResponse: ...


class ScriptedPolicy:
    """Emits a fixed list of turns in order, ignoring observations."""

    def __init__(self, script: Iterable[str]):
        self.script = list(script)
        self.position = 0

    def next_turn(self, request: PolicyTurnRequest) -> PolicyTurnResponse:
        if self.position >= len(self.script):
            raise ScriptExhausted(f"script of {len(self.script)} turns exhausted")
        turn = self.script[self.position]
        self.position += 1
        return PolicyTurnResponse(turn)


def scripted_policy(script: Iterable[str]) -> ScriptedPolicy:
    return ScriptedPolicy(script)


class ReplayPolicy(ScriptedPolicy):
    """Replays the raw turns stored in a trajectory log record."""

    def __init__(self, record: dict[str, Any]):
        turns = [s.get("raw") for s in record["steps"]]
        if any(t is None for t in turns):
            raise ValueError(f"record {record.get('question_id')!r} lacks raw turn text")
        super().__init__(turns)


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    max_tokens: int = 2048
    top_p: float | None = None
    seed: int | None = None
    logprobs: bool = False

    def to_payload(self) -> dict[str, Any]:
        payload: dict[str, Any] = {"temperature": self.temperature, "max_tokens": self.max_tokens}
        if self.top_p is not None:
            payload["top_p"] = self.top_p
        if self.seed is not None:
            payload["seed"] = self.seed
        if self.logprobs:
            payload["logprobs"] = True
        return payload


def _image_url(payload: Any) -> str:
    if isinstance(payload, (bytes, bytearray)):
        mime = "image/png" if bytes(payload[:8]) == b"\x89PNG\r\n\x1a\n" else "image/jpeg"
        return f"data:{mime};base64," + base64.b64encode(payload).decode("ascii")
    # stub frames travel as their token, no image data
    return f"stub:{payload}"


def message_to_chat(msg: Message) -> dict[str, Any]:
    if not msg.frames:
        return {"role": msg.role, "content": msg.text}
    parts: list[dict[str, Any]] = [{"type": "text", "text": msg.text}]
    for idx, payload in msg.frames:
        parts.append({"type": "text", "text": f"frame_index: {idx}"})
        parts.append({"type": "image_url", "image_url": {"url": _image_url(payload)}})
    return {"role": msg.role, "content": parts}


_OVERFLOW_RE = re.compile(r"context.{0,40}(length|window|limit)|too many tokens|maximum.{0,20}tokens", re.I)


@dataclass(frozen=True)
class ChatResult:
    text: str
    logprobs: tuple[float, ...] | None
    retries: int
    finish_reason: str | None = None


class ChatClient:
    """Minimal chat-completions client with capped exponential backoff."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        max_retries: int = 4,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        max_in_flight: int = 8,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = endpoint.rstrip("/")
        if not self.url.endswith("/chat/completions"):
            self.url += "/chat/completions"
        self.model = model
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(max_in_flight)
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def close(self) -> None:
        self._http.close()

    def backoff(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * 2**attempt)

    def complete(self, messages: list[dict[str, Any]], decoding: Decoding) -> ChatResult:
        payload = {"model": self.model, "messages": messages, **decoding.to_payload()}
        last_error = "no attempt made"
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self.backoff(attempt - 1))
            try:
                with self._gate:
                    resp = self._http.post(self.url, json=payload)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                log.warning("chat request failed (attempt %d): %s", attempt + 1, last_error)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                log.warning("chat request got %s (attempt %d)", last_error, attempt + 1)
                continue
            if resp.status_code >= 400:
                body = resp.text
                if resp.status_code in (400, 413) and _OVERFLOW_RE.search(body):
                    raise ContextOverflow(body[:500])
                raise PolicyTransportError(f"HTTP {resp.status_code}: {body[:500]}")
            return self._parse(resp, attempt)
        raise PolicyTransportError(f"gave up after {self.max_retries + 1} attempts: {last_error}")

    @staticmethod
    def _parse(resp: httpx.Response, retries: int) -> ChatResult:
        try:
            choice = resp.json()["choices"][0]
            text = choice["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise PolicyTransportError(f"malformed completion response: {exc}") from exc
        if choice.get("finish_reason") == "length" and not text:
            raise ContextOverflow("completion truncated with no output")
        lp = None
        content = (choice.get("logprobs") or {}).get("content")
        if content:
            lp = tuple(float(t["logprob"]) for t in content)
        return ChatResult(text, lp, retries, choice.get("finish_reason"))


class RemotePolicy:
    """Policy backed by a chat-completions endpoint.

    Stateless between calls: the full conversation travels with every
    request, so one instance can serve many concurrent episodes.
    """

    def __init__(self, client: ChatClient, decoding: Decoding | None = None):
        self.client = client
        self.decoding = decoding or Decoding()

    def next_turn(self, request: PolicyTurnRequest) -> PolicyTurnResponse:
        messages = [message_to_chat(m) for m in request.conversation]
        result = self.client.complete(messages, self.decoding)
        if not result.text:
            raise PolicyTransportError("endpoint returned an empty completion")
        return PolicyTurnResponse(result.text, result.logprobs, result.retries)


def remote_policy(
    endpoint: str | None = None,
    model_id: str | None = None,
    decoding: Decoding | None = None,
    **client_kw: Any,
) -> RemotePolicy:
    endpoint = endpoint or os.environ.get(ENV_ENDPOINT)
    model_id = model_id or os.environ.get(ENV_MODEL)
    if not endpoint or not model_id:
        raise ValueError(f"endpoint and model required (or set {ENV_ENDPOINT}/{ENV_MODEL})")
    client_kw.setdefault("api_key", os.environ.get(ENV_API_KEY))
    return RemotePolicy(ChatClient(endpoint, model_id, **client_kw), decoding)


@dataclass(frozen=True)
class JudgeVerdict:
    score: int
    rationale: str = ""

    def __post_init__(self) -> None:
        if not 0 <= self.score <= 100:
            raise ValueError(f"judge score {self.score} outside 0..100")


_SCORE_RE = re.compile(r"score\s*[:=]\s*\**\s*(\d{1,3})\b", re.I)
_BARE_RE = re.compile(r"^\s*(\d{1,3})\s*$")
_RATIONALE_RE = re.compile(r"rationale\s*[:=]\s*(.*)", re.I | re.S)


def parse_verdict(text: str) -> JudgeVerdict | None:
    """Pull a 0-100 score out of a judge reply; None if there is none."""
    score: int | None = None
    rationale = ""
    try:
        obj = json.loads(text)
    except ValueError:
        obj = None
    if isinstance(obj, dict) and isinstance(obj.get("score"), int) and not isinstance(obj["score"], bool):
        score, rationale = obj["score"], str(obj.get("rationale", ""))
    else:
        m = _SCORE_RE.search(text) or _BARE_RE.match(text)
        if m:
            score = int(m.group(1))
            r = _RATIONALE_RE.search(text)
            rationale = r.group(1).strip() if r else ""
    if score is None or not 0 <= score <= 100:
        return None
    return JudgeVerdict(score, rationale)


class JudgeClient:
    def __init__(self, client: ChatClient, rubric: str | None = None, decoding: Decoding | None = None):
        self.client = client
        self.rubric = rubric or load_asset("answer_rubric_v1.txt")
        self.decoding = decoding or Decoding(temperature=0.0, max_tokens=256)

    def score(self, question: str, reference: str, candidate: str, rubric: str | None = None) -> JudgeVerdict:
        prompt = (rubric or self.rubric).format(question=question, reference=reference, candidate=candidate)
        messages: list[dict[str, Any]] = [{"role": "user", "content": prompt}]
        for attempt in range(2):
            try:
                text = self.client.complete(messages, self.decoding).text
            except PolicyError as exc:
                raise JudgeUnavailable(str(exc)) from exc
            verdict = parse_verdict(text)
            if verdict is not None:
                return verdict
            messages += [
                {"role": "assistant", "content": text},
                {"role": "user", "content": load_asset("judge_reprompt_v1.txt")},
            ]
        raise UnparseableVerdict(f"no 0-100 score in judge reply: {text[:200]!r}")


def judge_score(
    question: str,
    reference: str,
    candidate: str,
    rubric: str | None = None,
    endpoint: str | None = None,
    model: str | None = None,
    **client_kw: Any,
) -> JudgeVerdict:
    endpoint = endpoint or os.environ.get(ENV_JUDGE_ENDPOINT)
    model = model or os.environ.get(ENV_JUDGE_MODEL)
    if not endpoint or not model:
        raise JudgeUnavailable(f"no judge configured (set {ENV_JUDGE_ENDPOINT}/{ENV_JUDGE_MODEL})")
    client_kw.setdefault("api_key", os.environ.get(ENV_JUDGE_API_KEY))
    client = ChatClient(endpoint, model, **client_kw)
    try:
        return JudgeClient(client, rubric).score(question, reference, candidate)
    finally:
        client.close()


class StaticJudge:
    """Offline judge returning preset verdicts keyed by candidate or question text."""

    def __init__(self, verdicts: dict[str, JudgeVerdict] | None = None, default: JudgeVerdict | None = None):
        self.verdicts = verdicts or {}
        self.default = default

    def score(self, question: str, reference: str, candidate: str, rubric: str | None = None) -> JudgeVerdict:
        for k in (candidate, question):
            if k in self.verdicts:
                return self.verdicts[k]
        if self.default is None:
            raise JudgeUnavailable(f"no preset verdict for {question!r}")
        return self.default


def load_scripts(obj: Any) -> Callable[[str], list[str]]:
    """Turn a script fixture into a lookup from question id to turn list.

    Accepts a plain list of turns (used for every question) or a mapping of
    question id to turns, with an optional ``"*"`` fallback.
    """
    if isinstance(obj, list):
        return lambda _qid: list(obj)
    if isinstance(obj, dict):
        def lookup(qid: str) -> list[str]:
            if qid in obj:
                return list(obj[qid])
            if "*" in obj:
                return list(obj["*"])
            raise KeyError(f"no script for question {qid!r}")
        return lookup
    raise TypeError("script fixture must be a list or a mapping")

