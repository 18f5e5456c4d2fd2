"""Chat-completion endpoint driver with record/replay cassettes.

Speaks the OpenAI-compatible chat-completions HTTP JSON protocol
(bearer token from the BRAIN_API_KEY environment variable). Every
request is keyed by a deterministic hash of (model, messages,
temperature, sample_index) so sampled batches replay exactly. A
cassette in replay mode never touches the network, which is what makes
the whole pipeline testable offline.

Retry policy: up to ``retry_attempts`` tries with exponential backoff
and jitter, retrying only transport failures, rate limits, and 5xx
responses. Long sampling campaigns must survive flaky endpoints.

Setting the BRAIN_FORBID_NETWORK environment variable makes any
attempted network call raise immediately; the test suite uses this to
prove replay runs are offline.
"""
from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import requests

from .errors import (
    AllSamplesFailed,
    CassetteCorrupt,
    CassetteMiss,
    EndpointNotConfigured,
    EndpointUnreachable,
    PathUnwritable,
    RateLimited,
)

API_KEY_ENV = "BRAIN_API_KEY"
NETWORK_GUARD_ENV = "BRAIN_FORBID_NETWORK"

MODE_RECORD = "record"
MODE_REPLAY = "replay"
MODE_PASSTHROUGH = "passthrough"
CASSETTE_MODES = (MODE_RECORD, MODE_REPLAY, MODE_PASSTHROUGH)

DEFAULT_MAX_TOKENS = 1024


@dataclass(frozen=True)
class GenerationConfig:
    model_name: str
    temperature: float = 0.0
    n_samples: int = 1
    max_tokens: int = DEFAULT_MAX_TOKENS
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class GenerationRequest:
    messages: tuple[dict, ...]
    config: GenerationConfig
    sample_index: int = 0

    @property
    def request_key(self) -> str:
        payload = json.dumps(
            {
                "model": self.config.model_name,
                "messages": list(self.messages),
                "temperature": self.config.temperature,
                "sample_index": self.sample_index,
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Completion:
    text: str
    finish_reason: str  # "stop" | "length" | "error"
    sample_index: int
    usage_tokens: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "finish_reason": self.finish_reason,
            "sample_index": self.sample_index,
            "usage_tokens": self.usage_tokens,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Completion":
        return cls(
            text=obj["text"],
            finish_reason=obj["finish_reason"],
            sample_index=obj["sample_index"],
            usage_tokens=obj.get("usage_tokens", 0),
        )


class Cassette:
    """JSON-Lines request/completion store.

    One object per line: {"key", "request", "completions"}. Record mode
    appends new keys and never overwrites existing entries; replay mode
    serves recorded completions and performs no network activity.
    """

    def __init__(self, path: str, mode: str, entries: dict[str, list[dict]]):
        self.path = path
        self.mode = mode
        self.entries = entries
        self._write_lock = threading.Lock()

    @classmethod
    def open(cls, path: str, mode: str) -> "Cassette":
        if mode not in CASSETTE_MODES:
            raise ValueError(f"unknown cassette mode: {mode!r}")
        entries: dict[str, list[dict]] = {}
        if mode == MODE_REPLAY and not os.path.exists(path):
            raise CassetteCorrupt(f"replay cassette missing: {path}")
        if os.path.exists(path):
            entries = cls._load(path)
        elif mode in (MODE_RECORD, MODE_PASSTHROUGH):
            parent = os.path.dirname(os.path.abspath(path)) or "."
            if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
                raise PathUnwritable(f"cannot write cassette at {path}")
        return cls(path, mode, entries)

    @staticmethod
    def _load(path: str) -> dict[str, list[dict]]:
        entries: dict[str, list[dict]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    key = obj["key"]
                    completions = obj["completions"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise CassetteCorrupt(f"{path}:{lineno}: {exc}") from exc
                if key not in entries:  # first recording wins
                    entries[key] = completions
        return entries

    def lookup(self, key: str) -> list[dict] | None:
        return self.entries.get(key)

    def record(self, key: str, request_obj: dict, completions: list[dict]) -> None:
        with self._write_lock:
            if key in self.entries:
                return
            self.entries[key] = completions
            line = json.dumps(
                {"key": key, "request": request_obj, "completions": completions},
                ensure_ascii=False,
            )
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()


@dataclass
class GatewayStats:
    network_calls: int = 0
    cassette_hits: int = 0
    retries: int = 0
    in_flight: int = 0
    peak_in_flight: int = 0


class Gateway:
    """Shareable endpoint handle with a bounded in-flight budget.

    Thread-safe: the semaphore caps simultaneous outstanding endpoint
    calls and cassette appends are serialized through a single writer.
    """

    def __init__(
        self,
        base_url: str | None = None,
        max_in_flight: int = 8,
        retry_attempts: int = 5,
        backoff_base: float = 0.25,
        backoff_cap: float = 8.0,
        request_timeout: float = 120.0,
        cassette: Cassette | None = None,
        rng: random.Random | None = None,
    ):
        self.base_url = base_url.rstrip("/") if base_url else None
        self.max_in_flight = max_in_flight
        self.retry_attempts = retry_attempts
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.request_timeout = request_timeout
        self.cassette = cassette
        self.stats = GatewayStats()
        self._semaphore = threading.Semaphore(max_in_flight)
        self._stats_lock = threading.Lock()
        self._rng = rng or random.Random()
        self._session = requests.Session()

    def with_cassette(self, path: str, mode: str) -> "Gateway":
        """Return a handle routing all traffic through the cassette."""
        clone = Gateway(
            base_url=self.base_url,
            max_in_flight=self.max_in_flight,
            retry_attempts=self.retry_attempts,
            backoff_base=self.backoff_base,
            backoff_cap=self.backoff_cap,
            request_timeout=self.request_timeout,
            cassette=Cassette.open(path, mode),
        )
        return clone

    # --- generation ---

    def generate(self, request: GenerationRequest) -> Completion:
        key = request.request_key
        cassette = self.cassette
        if cassette is not None and cassette.mode == MODE_REPLAY:
            recorded = cassette.lookup(key)
            if recorded is None:
                raise CassetteMiss(f"no cassette entry for key {key[:12]}...")
            self._bump("cassette_hits")
            return Completion.from_dict(recorded[0])
        if cassette is not None and cassette.mode == MODE_RECORD:
            recorded = cassette.lookup(key)
            if recorded is not None:
                self._bump("cassette_hits")
                return Completion.from_dict(recorded[0])
            completion = self._call_endpoint(request)
            cassette.record(key, self._request_obj(request), [completion.to_dict()])
            return completion
        return self._call_endpoint(request)

    def sample_n(self, messages: list[dict], config: GenerationConfig) -> list[Completion]:
        """Draw ``config.n_samples`` completions for one message list.

        Individual sample failures come back as error completions; only
        a batch with zero usable samples raises.
        """
        requests_ = [
            GenerationRequest(messages=tuple(messages), config=config, sample_index=i)
            for i in range(config.n_samples)
        ]

        def run_one(req: GenerationRequest) -> Completion:
            try:
                return self.generate(req)
            except (EndpointUnreachable, RateLimited, CassetteMiss) as exc:
                return Completion(
                    text="",
                    finish_reason="error",
                    sample_index=req.sample_index,
                    error=str(exc),
                )

        if len(requests_) == 1:
            results = [run_one(requests_[0])]
        else:
            workers = min(len(requests_), self.max_in_flight)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run_one, requests_))
        results.sort(key=lambda c: c.sample_index)
        if all(c.finish_reason == "error" for c in results):
            raise AllSamplesFailed(f"all {len(results)} samples failed")
        return results

    # --- endpoint transport ---

    def _request_obj(self, request: GenerationRequest) -> dict:
        return {
            "model": request.config.model_name,
            "messages": list(request.messages),
            "temperature": request.config.temperature,
            "sample_index": request.sample_index,
            "max_tokens": request.config.max_tokens,
            "stop": list(request.config.stop_sequences),
        }

    def _call_endpoint(self, request: GenerationRequest) -> Completion:
        if self.base_url is None:
            raise EndpointNotConfigured(
                "no endpoint base URL configured and cassette cannot serve request"
            )
        if os.environ.get(NETWORK_GUARD_ENV):
            raise EndpointUnreachable("network calls forbidden by BRAIN_FORBID_NETWORK")

        payload = {
            "model": request.config.model_name,
            "messages": list(request.messages),
            "temperature": request.config.temperature,
            "max_tokens": request.config.max_tokens,
            "n": 1,
        }
        if request.config.stop_sequences:
            payload["stop"] = list(request.config.stop_sequences)
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None
        rate_limited = False
        for attempt in range(self.retry_attempts):
            if attempt > 0:
                self._bump("retries")
                delay = min(self.backoff_base * (2 ** (attempt - 1)), self.backoff_cap)
                time.sleep(delay + self._rng.uniform(0, delay / 2))
            try:
                with self._in_flight():
                    resp = self._session.post(
                        url, json=payload, headers=headers, timeout=self.request_timeout
                    )
            except requests.RequestException as exc:
                last_error = exc
                rate_limited = False
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = EndpointUnreachable(f"HTTP {resp.status_code}")
                rate_limited = resp.status_code == 429
                continue
            if resp.status_code != 200:
                raise EndpointUnreachable(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return self._parse_response(resp.json(), request.sample_index)

        if rate_limited:
            raise RateLimited(f"rate limited after {self.retry_attempts} attempts")
        raise EndpointUnreachable(
            f"endpoint failed after {self.retry_attempts} attempts: {last_error}"
        )

    @staticmethod
    def _parse_response(body: dict, sample_index: int) -> Completion:
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise EndpointUnreachable(f"malformed endpoint response: {exc}") from exc
        finish = choice.get("finish_reason") or "stop"
        if finish not in ("stop", "length"):
            finish = "error"
        usage = (body.get("usage") or {}).get("total_tokens", 0)
        return Completion(
            text=text, finish_reason=finish, sample_index=sample_index,
            usage_tokens=usage,
        )

    # --- bookkeeping ---

    def _in_flight(self):
        gateway = self

        class _Guard:
            def __enter__(self):
                gateway._semaphore.acquire()
                with gateway._stats_lock:
                    gateway.stats.network_calls += 1
                    gateway.stats.in_flight += 1
                    gateway.stats.peak_in_flight = max(
                        gateway.stats.peak_in_flight, gateway.stats.in_flight
                    )

            def __exit__(self, *exc):
                with gateway._stats_lock:
                    gateway.stats.in_flight -= 1
                gateway._semaphore.release()

        return _Guard()

    def _bump(self, name: str) -> None:
        with self._stats_lock:
            setattr(self.stats, name, getattr(self.stats, name) + 1)


def scheduled_requests(model_names: list[str], n_samples: int, n_questions: int) -> int:
    """Total generation requests a sampling campaign will schedule."""
    return len(model_names) * n_samples * n_questions
