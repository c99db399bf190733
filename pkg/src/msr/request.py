"""Completion request/result types shared by every backend."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .errors import RequestError

ROLE_TAGS = ("item_mllm", "preference_llm", "recommender_mllm")
MLLM_ROLE_TAGS = ("item_mllm", "recommender_mllm")
SPEAKERS = ("system", "user", "assistant")


@dataclass(frozen=True)
class Message:
    speaker: str
    text: str


@dataclass(frozen=True)
class ImagePayload:
    data: bytes

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


@dataclass(frozen=True)
class CompletionOptions:
    max_tokens: int = 512
    temperature: float = 0.0
    top_logprobs: int = 0
    teacher_forced_completion: str | None = None


@dataclass
class CompletionRequest:
    role_tag: str
    messages: list[Message]
    images: list[ImagePayload] = field(default_factory=list)
    options: CompletionOptions = field(default_factory=CompletionOptions)
    # free-form labels (user_id, item_id, ...) -- part of the cache key,
    # surfaced to backends for diagnostics and mock oracles
    tags: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if self.role_tag not in ROLE_TAGS:
            raise RequestError(f"unknown role_tag {self.role_tag!r}")
        if not self.messages:
            raise RequestError("request has no messages")
        for m in self.messages:
            if m.speaker not in SPEAKERS:
                raise RequestError(f"unknown speaker {m.speaker!r}")
        if self.options.max_tokens < 1:
            raise RequestError("max_tokens must be >= 1")
        if self.options.temperature < 0:
            raise RequestError("temperature must be >= 0")
        if self.options.top_logprobs < 0:
            raise RequestError("top_logprobs must be >= 0")
        if self.images and self.role_tag not in MLLM_ROLE_TAGS:
            raise RequestError(
                f"images are not permitted for role_tag {self.role_tag!r}"
            )
        tfc = self.options.teacher_forced_completion
        if tfc is not None and not tfc:
            raise RequestError("teacher_forced_completion must be non-empty when set")

    def canonical(self) -> dict:
        """Stable structure for hashing; images contribute content hashes only."""
        return {
            "role_tag": self.role_tag,
            "messages": [[m.speaker, m.text] for m in self.messages],
            "images": [img.sha256 for img in self.images],
            "options": {
                "max_tokens": self.options.max_tokens,
                "temperature": self.options.temperature,
                "top_logprobs": self.options.top_logprobs,
                "teacher_forced_completion": self.options.teacher_forced_completion,
            },
            "tags": dict(sorted(self.tags.items())),
        }

    def prompt_text(self) -> str:
        return "\n".join(m.text for m in self.messages)


@dataclass
class CompletionResult:
    text: str
    first_token_logprobs: dict[str, float] = field(default_factory=dict)
    token_logprobs: list[float] | None = None
    usage: dict = field(default_factory=dict)
    cache_hit: bool = False

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "first_token_logprobs": self.first_token_logprobs,
            "token_logprobs": self.token_logprobs,
            "usage": self.usage,
        }

    @classmethod
    def from_json(cls, d: dict, cache_hit: bool = False) -> "CompletionResult":
        return cls(
            text=d["text"],
            first_token_logprobs=dict(d.get("first_token_logprobs") or {}),
            token_logprobs=d.get("token_logprobs"),
            usage=dict(d.get("usage") or {}),
            cache_hit=cache_hit,
        )
