"""Chat-completions client that asks a language model which strings are discriminative.

Every mode goes through the same path: build the prompt, check the cache,
call a transport, parse a JSON array out of the reply, then intersect it with
the input. The live transport POSTs to an HTTP endpoint. The mock transport
answers from a decision table and never opens a socket.

Cache records are JSON lines keyed on (sorted normalised text set, model name,
template hash), so they stay valid across process restarts.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Protocol

import httpx

from .errors import ConfigurationError, LlmError, LlmParseError, TemplateError
from .textverify import normalize_text, rule_filter

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_TEMPLATE",
    "SYSTEM_MESSAGE",
    "FilterExchange",
    "HttpTransport",
    "LlmClient",
    "LlmConfig",
    "MockTransport",
    "parse_kept",
    "render_prompt",
]

PLACEHOLDER = "{texts}"
DEFAULT_TEMPLATE = resources.files("placetext").joinpath("prompts/default_filter.txt").read_text(encoding="utf-8")
SYSTEM_MESSAGE = (
    "You select location-discriminative scene text for indoor place recognition. "
    "Answer only with a JSON array of strings."
)
MODES = ("live", "mock", "fallback-to-rule")


def default_cache_path() -> Path:
    base = os.environ.get("XDG_CACHE_HOME") or os.path.join(os.path.expanduser("~"), ".cache")
    return Path(base) / "placetext" / "llm-filter.jsonl"


@dataclass(frozen=True)
class LlmConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o-mini"
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 30.0
    max_retries: int = 2
    retry_backoff: float = 0.5
    cache_path: str | None = None
    mode: str = "live"
    max_concurrency: int = 4
    template: str = DEFAULT_TEMPLATE
    mock_table: str | None = None

    def __post_init__(self):
        if not self.timeout > 0:
            raise ConfigurationError("timeout must be positive")
        if self.max_retries < 0:
            raise ConfigurationError("max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise ConfigurationError("max_concurrency must be >= 1")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if PLACEHOLDER not in self.template:
            raise TemplateError(f"template lacks the {PLACEHOLDER} placeholder")

    @property
    def template_hash(self) -> str:
        return hashlib.sha256(self.template.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class FilterExchange:
    candidates: tuple[str, ...]
    prompt: str
    kept: tuple[str, ...]
    latency_ms: float
    cache_hit: bool
    model: str = ""
    template_hash: str = ""

    def to_json(self, key: str) -> dict:
        return {
            "key": key,
            "candidates": list(self.candidates),
            "kept": list(self.kept),
            "model": self.model,
            "template_hash": self.template_hash,
            "latency_ms": self.latency_ms,
        }


def render_prompt(texts, template: str = DEFAULT_TEMPLATE) -> str:
    if not template or PLACEHOLDER not in template:
        raise TemplateError(f"template lacks the {PLACEHOLDER} placeholder")
    return template.replace(PLACEHOLDER, json.dumps(list(texts), ensure_ascii=False, separators=(",", ":")))


_FENCE = re.compile(r"^```[a-zA-Z]*\s*|\s*```$")


def parse_kept(content: str) -> list[str]:
    """Extract the JSON array of strings from a model reply."""
    text = _FENCE.sub("", content.strip())
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        start, end = text.find("["), text.rfind("]")
        if start < 0 or end <= start:
            raise LlmParseError(f"no JSON array in reply: {content[:80]!r}") from None
        try:
            value = json.loads(text[start:end + 1])
        except json.JSONDecodeError as exc:
            raise LlmParseError(f"malformed JSON array in reply: {exc}") from exc
    if isinstance(value, dict):
        value = next((v for v in value.values() if isinstance(v, list)), None)
    if not isinstance(value, list):
        raise LlmParseError(f"reply is not a JSON array: {content[:80]!r}")
    return [v for v in value if isinstance(v, str)]


class Transport(Protocol):
    def __call__(self, payload: dict, texts: list[str]) -> str: ...


class HttpTransport:
    """POST a chat-completions payload and return the first choice's content."""

    def __init__(self, config: LlmConfig, client: httpx.Client | None = None):
        key = os.environ.get(config.api_key_env)
        if not key:
            raise ConfigurationError(f"environment variable {config.api_key_env} is not set")
        self._config = config
        self._headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
        self._client = client or httpx.Client(timeout=config.timeout)

    def __call__(self, payload: dict, texts: list[str]) -> str:
        cfg = self._config
        last: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                time.sleep(cfg.retry_backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(cfg.endpoint, json=payload, headers=self._headers)
            except httpx.HTTPError as exc:
                last = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = LlmError(f"HTTP {resp.status_code} from {cfg.endpoint}")
                continue
            if resp.status_code >= 400:
                raise LlmError(f"HTTP {resp.status_code} from {cfg.endpoint}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise LlmParseError(f"unexpected response body: {exc}") from exc
        raise LlmError(f"request failed after {cfg.max_retries + 1} attempts: {last}")


class MockTransport:
    """Scripted stand-in for the remote model.

    ``table`` maps normalised strings to ``"keep"``/``"drop"`` (or booleans).
    The optional ``"*"`` entry sets the policy for unlisted strings:
    ``"keep"``, ``"drop"`` (default) or ``"digits"`` (the rule filter).
    ``extra`` strings are appended to every reply, to imitate hallucination.
    """

    def __init__(self, table: Mapping[str, object] | None = None, extra=()):
        table = dict(table or {})
        self.default = str(table.pop("*", "drop"))
        if self.default not in ("keep", "drop", "digits"):
            raise ConfigurationError(f"unknown mock default policy {self.default!r}")
        self.table = {normalize_text(k): self._decision(v) for k, v in table.items()}
        self.extra = list(extra)
        self.calls = 0

    @staticmethod
    def _decision(v) -> bool:
        if isinstance(v, bool):
            return v
        if v in ("keep", "drop"):
            return v == "keep"
        raise ConfigurationError(f"mock decision must be keep/drop, got {v!r}")

    @classmethod
    def from_file(cls, path) -> "MockTransport":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    @classmethod
    def pass_through(cls) -> "MockTransport":
        return cls({"*": "keep"})

    def keeps(self, text: str) -> bool:
        if text in self.table:
            return self.table[text]
        if self.default == "digits":
            return bool(rule_filter([text]))
        return self.default == "keep"

    def __call__(self, payload: dict, texts: list[str]) -> str:
        self.calls += 1
        return json.dumps([t for t in texts if self.keeps(t)] + self.extra)


class _Unavailable:
    def __init__(self, reason: str):
        self.reason = reason

    def __call__(self, payload: dict, texts: list[str]) -> str:
        raise LlmError(self.reason)


class LlmClient:
    """Thread-safe filter client with a persistent exchange cache."""

    def __init__(self, config: LlmConfig, transport: Transport | Callable | None = None):
        self.config = config
        if transport is None:
            if config.mode == "mock":
                transport = MockTransport.from_file(config.mock_table) if config.mock_table else MockTransport()
            else:
                try:
                    transport = HttpTransport(config)
                except ConfigurationError as exc:
                    if config.mode != "fallback-to-rule":
                        raise
                    transport = _Unavailable(str(exc))
        self._transport = transport
        self._slots = threading.BoundedSemaphore(config.max_concurrency)
        self._lock = threading.Lock()
        self._cache: dict[str, tuple[str, ...]] = {}
        self.remote_calls = 0
        self.last_exchange: FilterExchange | None = None
        cache_path = config.cache_path
        if cache_path is None and config.mode != "mock":
            cache_path = str(default_cache_path())
        self._cache_path = Path(cache_path) if cache_path else None
        if self._cache_path is not None and self._cache_path.exists():
            self._load_cache()

    def _load_cache(self) -> None:
        with open(self._cache_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    self._cache[rec["key"]] = tuple(rec["kept"])
                except (ValueError, KeyError, TypeError):
                    log.warning("skipping unreadable cache line in %s", self._cache_path)

    def cache_key(self, texts) -> str:
        raw = json.dumps(
            {"texts": sorted(set(texts)), "model": self.config.model, "template": self.config.template_hash},
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()

    def payload(self, prompt: str) -> dict:
        return {
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": SYSTEM_MESSAGE},
                {"role": "user", "content": prompt},
            ],
        }

    def exchange(self, texts) -> FilterExchange:
        start = time.perf_counter()
        normalized = list(dict.fromkeys(n for n in (normalize_text(t) for t in texts) if n))
        prompt = render_prompt(normalized, self.config.template)
        meta = {"model": self.config.model, "template_hash": self.config.template_hash}
        if not normalized:
            ex = FilterExchange((), prompt, (), (time.perf_counter() - start) * 1e3, False, **meta)
            self.last_exchange = ex
            return ex

        key = self.cache_key(normalized)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            kept_set = set(cached)
            kept = tuple(t for t in normalized if t in kept_set)
            ex = FilterExchange(tuple(normalized), prompt, kept, (time.perf_counter() - start) * 1e3, True, **meta)
            self.last_exchange = ex
            return ex

        with self._slots:
            with self._lock:
                self.remote_calls += 1
            content = self._transport(self.payload(prompt), normalized)
        answered = {normalize_text(s) for s in parse_kept(content)}
        kept = tuple(t for t in normalized if t in answered)
        ex = FilterExchange(tuple(normalized), prompt, kept, (time.perf_counter() - start) * 1e3, False, **meta)
        with self._lock:
            self._cache[key] = kept
            if self._cache_path is not None:
                self._cache_path.parent.mkdir(parents=True, exist_ok=True)
                with open(self._cache_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(ex.to_json(key), ensure_ascii=False) + "\n")
        self.last_exchange = ex
        return ex

    def request_filter(self, texts) -> list[str]:
        return list(self.exchange(texts).kept)


def client_from_args(
    mode: str = "live",
    endpoint: str | None = None,
    model: str | None = None,
    mock_table: str | None = None,
    cache_path: str | None = None,
    **overrides,
) -> LlmClient:
    fields_ = {k: v for k, v in overrides.items() if v is not None}
    if endpoint:
        fields_["endpoint"] = endpoint
    if model:
        fields_["model"] = model
    if mock_table:
        mode = "mock"
        fields_["mock_table"] = mock_table
    return LlmClient(LlmConfig(mode=mode, cache_path=cache_path, **fields_))
