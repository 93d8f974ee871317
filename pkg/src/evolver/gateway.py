"""LLM access: a chat-completions HTTP backend, a scripted backend, and structured output parsing."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, NamedTuple, Sequence

import httpx

log = logging.getLogger(__name__)

SHAPES = ("criteria-set", "evaluation-report", "hypothesis-list")
_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n(.*?)```", re.DOTALL)


class GatewayError(RuntimeError):
    pass


class GatewayTimeout(GatewayError):
    pass


class ScriptExhausted(GatewayError):
    def __init__(self, index: int):
        super().__init__("script exhausted")
        self.index = index


class ScriptMismatch(GatewayError):
    def __init__(self, index: int, expected: str):
        super().__init__(f"exchange {index}: prompt does not contain scripted match {expected[:80]!r}")
        self.index = index


class StructuredOutputError(GatewayError):
    def __init__(self, message: str, raw: str, retries: int):
        super().__init__(message)
        self.raw = raw
        self.retries = retries


@dataclass(frozen=True)
class ProviderConfig:
    base_url: str = "http://localhost:8000"
    model_name: str = "llama-3.2-3b"
    temperature: float = 0.0
    hypothesis_temperature: float = 0.7
    request_timeout: float = 60.0
    max_retries: int = 2
    seed: int | None = None
    api_key: str | None = None

    def __post_init__(self) -> None:
        if self.request_timeout <= 0:
            raise ValueError("request_timeout must be > 0")
        if not 0 <= self.max_retries <= 10:
            raise ValueError("max_retries must be in [0, 10]")
        if self.temperature < 0 or self.hypothesis_temperature < 0:
            raise ValueError("temperature must be >= 0")

    @classmethod
    def from_env(cls, **overrides: Any) -> "ProviderConfig":
        env = {
            "base_url": os.environ.get("EVOLVER_LLM_BASE_URL"),
            "model_name": os.environ.get("EVOLVER_LLM_MODEL"),
            "api_key": os.environ.get("EVOLVER_LLM_API_KEY"),
        }
        kwargs = {k: v for k, v in env.items() if v}
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


@dataclass(frozen=True)
class ChatExchange:
    system_prompt: str
    user_prompt: str
    response: str
    latency: float
    phase: str = "run"

    def to_dict(self) -> dict[str, Any]:
        return {
            "phase": self.phase,
            "system_prompt": self.system_prompt,
            "user_prompt": self.user_prompt,
            "response": self.response,
            "latency": self.latency,
        }


def prompt_key(system_prompt: str, user_prompt: str) -> str:
    """The text a script entry's ``match`` is searched in."""
    return f"{system_prompt}\n\n{user_prompt}"


class HttpBackend:
    """POSTs to ``{base_url}/v1/chat/completions``, retrying transport errors."""

    def __init__(self, config: ProviderConfig, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        headers = {"Authorization": f"Bearer {config.api_key}"} if config.api_key else {}
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            timeout=config.request_timeout,
            headers=headers,
            transport=transport,
        )
        self._sleep = sleep

    def clock(self) -> float:
        return time.perf_counter()

    def send(self, system_prompt: str, user_prompt: str, temperature: float | None) -> tuple[str, float]:
        body: dict[str, Any] = {
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_prompt},
            ],
            "temperature": self.config.temperature if temperature is None else temperature,
        }
        if self.config.seed is not None:
            body["seed"] = self.config.seed
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            start = time.perf_counter()
            try:
                resp = self._client.post("/v1/chat/completions", json=body)
                resp.raise_for_status()
                text = resp.json()["choices"][0]["message"]["content"] or ""
                return text, time.perf_counter() - start
            except httpx.TimeoutException as exc:
                last = GatewayTimeout(f"request timed out after {self.config.request_timeout}s")
                last.__cause__ = exc
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last = exc
            log.warning("chat request attempt %d failed: %r", attempt + 1, last)
            if attempt < self.config.max_retries:
                self._sleep(min(2.0 ** attempt, 8.0))
        if isinstance(last, GatewayTimeout):
            raise last
        raise GatewayError(f"transport failure after {self.config.max_retries + 1} attempts: {last!r}")


class ScriptedBackend:
    """Replays canned responses in order.

    Each entry is ``{"response": str, "match": str | None, "latency": float | None}``.
    A ``match`` must occur in the prompt or the call fails, which is how replay detects
    divergence. Time is virtual: the clock only advances by the scripted latencies.
    """

    def __init__(self, entries: Sequence[dict[str, Any]]):
        for i, e in enumerate(entries):
            if not isinstance(e, dict) or not isinstance(e.get("response"), str):
                raise ValueError(f"script entry {i} needs a string 'response'")
        self.entries = list(entries)
        self.position = 0
        self._now = 0.0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, list):
            raise ValueError("script file must hold a JSON array")
        return cls(data)

    @classmethod
    def from_responses(cls, responses: Sequence[str]) -> "ScriptedBackend":
        return cls([{"response": r} for r in responses])

    @property
    def remaining(self) -> int:
        return len(self.entries) - self.position

    def clock(self) -> float:
        return self._now

    def send(self, system_prompt: str, user_prompt: str, temperature: float | None) -> tuple[str, float]:
        with self._lock:
            index = self.position
            if index >= len(self.entries):
                raise ScriptExhausted(index)
            entry = self.entries[index]
            match = entry.get("match")
            if match and match not in prompt_key(system_prompt, user_prompt):
                raise ScriptMismatch(index, match)
            self.position += 1
            latency = float(entry.get("latency") or 0.0)
            self._now += latency
            return entry["response"], latency


class Parsed(NamedTuple):
    data: Any
    retries: int
    raw: str


class Gateway:
    """Single choke point for model calls; every exchange is logged before it is returned."""

    def __init__(self, backend, config: ProviderConfig | None = None,
                 log_path: str | os.PathLike | None = None, phase: str = "run"):
        self.backend = backend
        self.config = config or getattr(backend, "config", None) or ProviderConfig()
        self.log_path = Path(log_path) if log_path else None
        self.phase = phase
        self.exchanges: list[ChatExchange] = []
        self._log_lock = threading.Lock()

    @classmethod
    def scripted(cls, responses_or_entries: Sequence[Any], **kwargs: Any) -> "Gateway":
        entries = [r if isinstance(r, dict) else {"response": r} for r in responses_or_entries]
        return cls(ScriptedBackend(entries), **kwargs)

    @property
    def is_scripted(self) -> bool:
        return isinstance(self.backend, ScriptedBackend)

    def clock(self) -> float:
        return self.backend.clock()

    def complete(self, system_prompt: str, user_prompt: str, temperature: float | None = None) -> str:
        if not system_prompt.strip() or not user_prompt.strip():
            raise ValueError("prompts must be nonempty")
        text, latency = self.backend.send(system_prompt, user_prompt, temperature)
        self._record(ChatExchange(system_prompt, user_prompt, text, latency, self.phase))
        return text

    def complete_structured(self, system_prompt: str, user_prompt: str, expected_shape: str,
                            temperature: float | None = None) -> Parsed:
        if expected_shape not in SHAPES:
            raise ValueError(f"unknown shape {expected_shape!r}")
        raw = self.complete(system_prompt, user_prompt, temperature)
        retries = 0
        while True:
            try:
                return Parsed(parse_shape(raw, expected_shape), retries, raw)
            except ValueError as exc:
                error = str(exc)
            if retries >= self.config.max_retries:
                raise StructuredOutputError(
                    f"unparseable {expected_shape} after {retries} repair attempts: {error}", raw, retries
                )
            retries += 1
            raw = self.complete(system_prompt, repair_prompt(user_prompt, raw, error, expected_shape), temperature)

    def _record(self, exchange: ChatExchange) -> None:
        with self._log_lock:
            self.exchanges.append(exchange)
            if self.log_path is not None:
                with open(self.log_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(exchange.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def repair_prompt(user_prompt: str, bad_response: str, error: str, shape: str) -> str:
    return (
        f"{user_prompt}\n\n"
        f"Your previous reply could not be parsed as a {shape} JSON block.\n"
        f"Parse error: {error}\n"
        f"Previous reply:\n{bad_response}\n\n"
        "Reply again with exactly one fenced ```json block and nothing else."
    )


def extract_json(text: str) -> Any:
    """Return the first fenced JSON block, or the whole text if it is bare JSON."""
    for lang, body in _FENCE.findall(text or ""):
        if lang.lower() in ("", "json"):
            try:
                return json.loads(body)
            except json.JSONDecodeError as exc:
                raise ValueError(f"fenced block is not valid JSON: {exc}") from exc
    try:
        return json.loads(text)
    except (json.JSONDecodeError, TypeError):
        raise ValueError("no fenced JSON block found") from None


def parse_shape(text: str, shape: str) -> Any:
    data = extract_json(text)
    if shape == "hypothesis-list":
        if isinstance(data, dict) and "hypotheses" in data:
            data = data["hypotheses"]
        if not isinstance(data, list):
            raise ValueError("expected a JSON list of hypothesis records")
        if not all(isinstance(x, dict) for x in data):
            raise ValueError("every hypothesis must be a JSON object")
        return data
    if shape == "criteria-set":
        if isinstance(data, dict):
            data = data.get("criteria", data.get("qualitative"))
        if not isinstance(data, list):
            raise ValueError("expected a list of criteria under 'criteria'")
        for item in data:
            if not isinstance(item, dict) or not isinstance(item.get("name"), str) or not item["name"].strip():
                raise ValueError("each criterion needs a nonempty 'name'")
        return data
    # evaluation-report: one judged criterion
    if not isinstance(data, dict):
        raise ValueError("expected a JSON object with 'score' and 'rationale'")
    score = data.get("score")
    if isinstance(score, bool) or not isinstance(score, (int, float)):
        raise ValueError("'score' must be a number")
    rationale = data.get("rationale", "")
    if not isinstance(rationale, str):
        raise ValueError("'rationale' must be a string")
    return {"score": float(score), "rationale": rationale}


def load_exchanges(path: str | os.PathLike, phase: str | None = None) -> list[ChatExchange]:
    out = []
    p = Path(path)
    if not p.exists():
        return out
    for line in p.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if phase is None or d.get("phase") == phase:
            out.append(ChatExchange(d["system_prompt"], d["user_prompt"], d["response"],
                                    float(d.get("latency", 0.0)), d.get("phase", "run")))
    return out


def script_from_exchanges(exchanges: Sequence[ChatExchange]) -> list[dict[str, Any]]:
    return [
        {"match": prompt_key(e.system_prompt, e.user_prompt), "response": e.response, "latency": e.latency}
        for e in exchanges
    ]
