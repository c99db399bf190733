"""Uniform client over chat-completion backends.

Routes requests by role_tag, enforces a bounded in-flight count per
backend, retries transient transport failures with exponential backoff,
and serves/fills a content-addressed disk cache. The handle is safe to
share across threads.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field, replace

from .cache import ResponseCache, cache_key
from .errors import CapabilityError, ConfigError, TransportError
from .request import CompletionRequest, CompletionResult


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay_s: float = 0.2
    multiplier: float = 2.0

    def delay(self, attempt: int) -> float:
        return self.base_delay_s * self.multiplier**attempt


@dataclass
class GatewayStats:
    backend_calls: int = 0
    cache_hits: int = 0
    by_role: dict = field(default_factory=dict)

    def record(self, role_tag: str, cache_hit: bool) -> None:
        entry = self.by_role.setdefault(role_tag, {"backend_calls": 0, "cache_hits": 0})
        if cache_hit:
            self.cache_hits += 1
            entry["cache_hits"] += 1
        else:
            self.backend_calls += 1
            entry["backend_calls"] += 1

    def snapshot(self) -> dict:
        return {
            "backend_calls": self.backend_calls,
            "cache_hits": self.cache_hits,
            "by_role": {k: dict(v) for k, v in self.by_role.items()},
        }


class Gateway:
    def __init__(
        self,
        backends: dict[str, object],
        cache: ResponseCache | None = None,
        retry: RetryPolicy = RetryPolicy(),
        max_in_flight: int | dict[str, int] = 8,
    ):
        self.backends = dict(backends)
        self.cache = cache
        self.retry = retry
        self._semaphores: dict[str, threading.BoundedSemaphore] = {}
        for role, backend in self.backends.items():
            if isinstance(max_in_flight, dict):
                limit = max_in_flight.get(role, 8)
            else:
                limit = max_in_flight
            # one semaphore per backend object so shared backends share the bound
            key = id(backend)
            if key not in self._semaphores:
                self._semaphores[key] = threading.BoundedSemaphore(limit)
        self.stats = GatewayStats()
        self._stats_lock = threading.Lock()

    def backend_for(self, role_tag: str):
        backend = self.backends.get(role_tag)
        if backend is None:
            raise ConfigError(f"no backend configured for role_tag {role_tag!r}")
        return backend

    def complete(self, request: CompletionRequest) -> CompletionResult:
        request.validate()
        backend = self.backend_for(request.role_tag)
        if request.options.top_logprobs > 0 and not getattr(backend, "supports_logprobs", False):
            raise CapabilityError(
                f"backend {backend.backend_id} does not expose log-probabilities"
            )
        key = cache_key(backend.backend_id, backend.model, request)
        if self.cache is not None:
            cached = self.cache.get(backend.backend_id, backend.model, key)
            if cached is not None:
                with self._stats_lock:
                    self.stats.record(request.role_tag, cache_hit=True)
                return cached
        result = self._call_with_retry(backend, request)
        if self.cache is not None:
            self.cache.put(backend.backend_id, backend.model, key, result)
        with self._stats_lock:
            self.stats.record(request.role_tag, cache_hit=False)
        return result

    def teacher_forced_logprobs(self, request: CompletionRequest) -> CompletionResult:
        if request.options.teacher_forced_completion is None:
            raise ConfigError("teacher_forced_logprobs requires teacher_forced_completion")
        backend = self.backend_for(request.role_tag)
        if not getattr(backend, "supports_echo", False):
            raise CapabilityError(
                f"backend {backend.backend_id} cannot score a provided completion"
            )
        result = self.complete(request)
        forced = request.options.teacher_forced_completion
        if not result.token_logprobs:
            raise CapabilityError(
                f"backend {backend.backend_id} returned no per-token logprobs for {forced!r}"
            )
        return result

    def _call_with_retry(self, backend, request: CompletionRequest) -> CompletionResult:
        sem = self._semaphores[id(backend)]
        last: TransportError | None = None
        for attempt in range(self.retry.max_attempts):
            try:
                with sem:
                    result = backend.complete(request)
                return replace(result, cache_hit=False)
            except TransportError as e:
                last = e
                if attempt + 1 < self.retry.max_attempts:
                    time.sleep(self.retry.delay(attempt))
        raise TransportError(
            f"backend {backend.backend_id}: giving up after "
            f"{self.retry.max_attempts} attempts: {last}"
        )

    def stats_snapshot(self) -> dict:
        with self._stats_lock:
            return self.stats.snapshot()
