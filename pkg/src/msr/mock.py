"""Deterministic mock backend.

Behaviors:
  hash_text        -- generated text echoes the longest distinctive prompt
                      tokens plus words derived from the request hash, so
                      distinct prompts yield distinct outputs
  oracle_yes       -- first-token mass `yes_mass` on "yes" for configured
                      positive (user_id, item_id) pairs, on "no" otherwise
  uniform_logprob  -- every scored token gets logprob -token_cost
  random_yes       -- yes-probability drawn uniformly from a seeded hash of
                      the request tags (used for null-distribution runs)

Every behavior is a pure function of (seed, request), and the backend
records its calls and the peak number of concurrent in-flight requests so
tests can assert call-count and concurrency laws.
"""

from __future__ import annotations

import hashlib
import math
import re
import threading
import time

from .errors import CapabilityError, RequestError
from .request import CompletionRequest, CompletionResult
from .cache import cache_key

BEHAVIORS = ("hash_text", "oracle_yes", "uniform_logprob", "random_yes")

_WORD_RE = re.compile(r"[A-Za-z0-9_]+")


def _digest(seed: int, request: CompletionRequest) -> str:
    return hashlib.sha256(
        f"{seed}|{cache_key('mock', 'mock', request)}".encode()
    ).hexdigest()


def _unit_interval(*parts: str) -> float:
    """Deterministic uniform draw in (0, 1) from string parts."""
    h = hashlib.sha256("|".join(parts).encode()).digest()
    v = int.from_bytes(h[:8], "big") / 2**64
    return min(max(v, 1e-12), 1 - 1e-12)


def _salient_tokens(text: str, limit: int = 8) -> list[str]:
    seen: dict[str, int] = {}
    for pos, tok in enumerate(_WORD_RE.findall(text)):
        if tok not in seen:
            seen[tok] = pos
    ranked = sorted(seen, key=lambda t: (-len(t), seen[t]))
    return ranked[:limit]


class MockBackend:
    backend_id = "mock"
    supports_logprobs = True
    supports_echo = True

    def __init__(
        self,
        seed: int = 0,
        behavior: str = "hash_text",
        yes_mass: float = 1.0,
        positives: dict[str, str] | None = None,
        token_cost: float = math.log(2),
        model: str = "mock-model",
        latency_s: float = 0.0,
    ):
        if behavior not in BEHAVIORS:
            raise RequestError(f"unknown mock behavior {behavior!r}")
        if not (0 < yes_mass <= 1):
            raise RequestError("yes_mass must be in (0, 1]")
        if token_cost < 0:
            raise RequestError("token_cost must be >= 0")
        self.seed = seed
        self.behavior = behavior
        self.yes_mass = yes_mass
        self.positives = dict(positives or {})
        self.token_cost = token_cost
        self.model = model
        self.latency_s = latency_s
        self.calls: list[CompletionRequest] = []
        self.max_in_flight_observed = 0
        self._in_flight = 0
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def reset_instrumentation(self) -> None:
        with self._lock:
            self.calls = []
            self.max_in_flight_observed = 0

    # --- behavior internals -------------------------------------------------

    def _tokenize(self, text: str) -> list[str]:
        return text.split()

    def _is_positive(self, request: CompletionRequest) -> bool:
        user = request.tags.get("user_id")
        item = request.tags.get("item_id")
        return user is not None and self.positives.get(user) == item

    def _yes_probability(self, request: CompletionRequest) -> float:
        if self.behavior == "oracle_yes":
            return self.yes_mass if self._is_positive(request) else 1 - self.yes_mass
        if self.behavior == "random_yes":
            return _unit_interval(
                str(self.seed),
                request.tags.get("user_id", ""),
                request.tags.get("item_id", ""),
                request.prompt_text() if not request.tags else "",
            )
        return _unit_interval(str(self.seed), _digest(self.seed, request))

    def _generate_text(self, request: CompletionRequest) -> str:
        digest = _digest(self.seed, request)
        if self.behavior in ("oracle_yes", "random_yes"):
            return "yes" if self._yes_probability(request) >= 0.5 else "no"
        if self.behavior == "uniform_logprob":
            return "ok"
        salient = _salient_tokens(request.prompt_text())
        filler = [f"w{digest[i : i + 4]}" for i in range(0, 64, 4)]
        return " ".join(salient + filler)

    def _first_token_logprobs(self, request: CompletionRequest, text: str) -> dict[str, float]:
        if self.behavior == "uniform_logprob":
            return {"yes": -self.token_cost, "no": -self.token_cost}
        p_yes = self._yes_probability(request)
        out: dict[str, float] = {}
        if p_yes > 0:
            out["yes"] = math.log(p_yes)
        if p_yes < 1:
            out["no"] = math.log(1 - p_yes)
        if self.behavior == "hash_text":
            first = self._tokenize(text)[0]
            out[first] = math.log(0.5) + min(out.values(), default=0.0)
        return out

    def _token_logprobs(self, request: CompletionRequest, completion: str) -> list[float]:
        tokens = self._tokenize(completion)
        if not tokens:
            raise RequestError("teacher_forced_completion tokenized to nothing")
        if self.behavior == "uniform_logprob":
            return [-self.token_cost] * len(tokens)
        digest = _digest(self.seed, request)
        return [
            -_unit_interval(digest, str(i), tok) for i, tok in enumerate(tokens)
        ]

    # --- backend interface --------------------------------------------------

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._lock:
            self._in_flight += 1
            self.max_in_flight_observed = max(self.max_in_flight_observed, self._in_flight)
            self.calls.append(request)
        try:
            if self.latency_s:
                time.sleep(self.latency_s)
            return self._respond(request)
        finally:
            with self._lock:
                self._in_flight -= 1

    def _respond(self, request: CompletionRequest) -> CompletionResult:
        forced = request.options.teacher_forced_completion
        prompt_tokens = len(self._tokenize(request.prompt_text()))
        if forced is not None:
            if not self.supports_echo:
                raise CapabilityError("mock configured without echo support")
            lps = self._token_logprobs(request, forced)
            return CompletionResult(
                text=forced,
                first_token_logprobs=(
                    self._first_token_logprobs(request, forced)
                    if request.options.top_logprobs > 0
                    else {}
                ),
                token_logprobs=lps,
                usage={"prompt_tokens": prompt_tokens, "completion_tokens": len(lps)},
            )
        text = self._generate_text(request)
        return CompletionResult(
            text=text,
            first_token_logprobs=(
                self._first_token_logprobs(request, text)
                if request.options.top_logprobs > 0
                else {}
            ),
            token_logprobs=None,
            usage={
                "prompt_tokens": prompt_tokens,
                "completion_tokens": len(self._tokenize(text)),
            },
        )
