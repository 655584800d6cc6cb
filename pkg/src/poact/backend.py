"""Chat-completion backends: a production HTTP provider, a deterministic
scripted provider for tests, and token accounting.

Both providers speak the same request/response shape (ordered role/text turns
in, completion text plus usage out) so the loop drivers never care which one
they are talking to.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass

logger = logging.getLogger(__name__)


class BackendError(Exception):
    """Base class for backend failures."""


class TransportError(BackendError):
    """HTTP transport failed after all retries."""


class BackendExhausted(BackendError):
    """A scripted backend ran out of steps mid-run."""


class MatcherMismatch(BackendError):
    """A scripted step's matcher did not match the rendered request."""


@dataclass(frozen=True)
class TokenUsage:
    """Prompt/completion token counts. `estimated` marks counts derived from
    byte length rather than reported by a provider."""

    prompt_tokens: int = 0
    completion_tokens: int = 0
    estimated: bool = False

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            prompt_tokens=self.prompt_tokens + other.prompt_tokens,
            completion_tokens=self.completion_tokens + other.completion_tokens,
            estimated=self.estimated or other.estimated,
        )


def estimate_usage(prompt_text: str, completion_text: str) -> TokenUsage:
    """Fallback accounting when a provider reports no usage: ceil(bytes / 4)."""
    return TokenUsage(
        prompt_tokens=math.ceil(len(prompt_text.encode("utf-8")) / 4),
        completion_tokens=math.ceil(len(completion_text.encode("utf-8")) / 4),
        estimated=True,
    )


@dataclass(frozen=True)
class ChatRequest:
    """One completion request. Turns are (role, text) pairs; the first turn
    must be the system prompt."""

    turns: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()
    max_output: int = 4096

    def __post_init__(self) -> None:
        if not self.turns:
            raise ValueError("a chat request needs at least one turn")
        if self.turns[0][0] != "system":
            raise ValueError("the first turn must be system-role")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: TokenUsage


def render_request(request: ChatRequest) -> str:
    """Flatten a request into the text the scripted matcher runs against."""
    return "\n".join(f"[{role}] {text}" for role, text in request.turns)


@dataclass(frozen=True)
class ScriptStep:
    """One scripted completion: `match` is a substring the rendered request
    must contain (empty string matches anything)."""

    match: str
    response: str
    usage: TokenUsage | None = None


class ScriptedBackend:
    """Deterministic backend that replays an ordered script.

    Steps are consumed strictly in order; running past the end raises
    BackendExhausted and a non-matching request raises MatcherMismatch, so a
    diverging trajectory fails loudly instead of silently.
    """

    def __init__(self, steps: list[ScriptStep] | None = None) -> None:
        self._steps: list[ScriptStep] = list(steps or [])
        self._cursor = 0

    @classmethod
    def from_file(cls, path: str) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(
            [
                ScriptStep(
                    match=entry.get("match", ""),
                    response=entry["response"],
                    usage=(
                        TokenUsage(entry["prompt_tokens"], entry["completion_tokens"])
                        if "prompt_tokens" in entry
                        else None
                    ),
                )
                for entry in raw
            ]
        )

    @property
    def remaining(self) -> int:
        return len(self._steps) - self._cursor

    @property
    def consumed(self) -> int:
        return self._cursor

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self._cursor >= len(self._steps):
            raise BackendExhausted(
                f"script exhausted after {self._cursor} completions"
            )
        step = self._steps[self._cursor]
        rendered = render_request(request)
        if step.match and step.match not in rendered:
            raise MatcherMismatch(
                f"scripted step {self._cursor} expected substring {step.match!r} "
                f"in the rendered request (request starts: {rendered[:160]!r})"
            )
        self._cursor += 1
        usage = step.usage or estimate_usage(rendered, step.response)
        return ChatResponse(text=step.response, usage=usage)


class HttpBackend:
    """Chat-completions HTTP provider (system/user/assistant turns in,
    text + usage out). Retries transport-level failures with backoff and never
    alters completion text."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str | None = None,
        max_retries: int = 3,
        timeout: float = 120.0,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.timeout = timeout

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload: dict = {
            "model": self.model,
            "messages": [
                {"role": role, "content": text} for role, text in request.turns
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)
        body = json.dumps(payload).encode("utf-8")

        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            req = urllib.request.Request(
                f"{self.endpoint}/chat/completions",
                data=body,
                headers=self._headers(),
                method="POST",
            )
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    data = json.loads(resp.read().decode("utf-8"))
                return self._parse(request, data)
            except urllib.error.HTTPError as exc:
                if exc.code in (429,) or exc.code >= 500:
                    last_error = exc
                else:
                    raise TransportError(f"HTTP {exc.code}: {exc.reason}") from exc
            except (urllib.error.URLError, TimeoutError, OSError) as exc:
                last_error = exc
            if attempt < self.max_retries - 1:
                time.sleep(2**attempt)
        raise TransportError(f"backend unreachable after {self.max_retries} attempts: {last_error}")

    def _parse(self, request: ChatRequest, data: dict) -> ChatResponse:
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError) as exc:
            raise TransportError(f"malformed completion payload: {json.dumps(data)[:200]}") from exc
        usage_raw = data.get("usage") or {}
        if "prompt_tokens" in usage_raw:
            usage = TokenUsage(
                prompt_tokens=int(usage_raw.get("prompt_tokens", 0)),
                completion_tokens=int(usage_raw.get("completion_tokens", 0)),
            )
        else:
            usage = estimate_usage(render_request(request), text)
        return ChatResponse(text=text, usage=usage)


def complete(backend, request: ChatRequest) -> ChatResponse:
    """Run one completion against whichever provider is configured."""
    return backend.complete(request)


def accumulate(total: TokenUsage, response: ChatResponse) -> TokenUsage:
    """Fold a response's usage into a running total (fieldwise, monotone)."""
    return total + response.usage


@dataclass(frozen=True)
class BackendConfig:
    """Backend section of the runtime config file."""

    provider: str = "scripted"
    endpoint: str = ""
    model: str = ""
    temperature: float = 0.0
    api_key_env: str = ""
    max_retries: int = 3
    script: str = ""

    @classmethod
    def from_dict(cls, raw: dict) -> "BackendConfig":
        known = {f: raw[f] for f in cls.__dataclass_fields__ if f in raw}
        return cls(**known)


def build_backend(config: BackendConfig, script_steps: list[ScriptStep] | None = None):
    """Instantiate the provider named by the config. A scripted provider may
    be seeded directly with steps (tests) or from the config's script file."""
    if config.provider == "scripted":
        if script_steps is not None:
            return ScriptedBackend(script_steps)
        if config.script:
            return ScriptedBackend.from_file(config.script)
        return ScriptedBackend([])
    if config.provider == "http":
        if not config.endpoint:
            raise BackendError("http provider requires an endpoint")
        return HttpBackend(
            endpoint=config.endpoint,
            model=config.model,
            api_key_env=config.api_key_env or None,
            max_retries=config.max_retries,
        )
    raise BackendError(f"unknown provider {config.provider!r}")
