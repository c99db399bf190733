"""OpenAI-compatible chat-completions backend.

Images are embedded as base64 data URLs; first-token log-probabilities come
from the `logprobs`/`top_logprobs` fields. Teacher-forced scoring uses the
legacy completions endpoint with echo=true and is gated on the backend
declaring `supports_echo` in its config (most chat-only servers do not).
"""

from __future__ import annotations

import base64
import os

import httpx

from .errors import CapabilityError, ConfigError, TransportError
from .request import CompletionRequest, CompletionResult


class HttpBackend:
    supports_logprobs = True

    def __init__(
        self,
        backend_id: str,
        base_url: str,
        model: str,
        api_key_env: str | None = None,
        supports_echo: bool = False,
        timeout_s: float = 120.0,
    ):
        self.backend_id = backend_id
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.supports_echo = supports_echo
        self._client = httpx.Client(timeout=timeout_s)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise ConfigError(
                    f"backend {self.backend_id}: env var {self.api_key_env} not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def build_chat_payload(self, request: CompletionRequest) -> dict:
        messages = []
        for m in request.messages:
            messages.append({"role": m.speaker, "content": m.text})
        if request.images and messages:
            # attach all images to the last user message as data URLs
            for i in range(len(messages) - 1, -1, -1):
                if messages[i]["role"] == "user":
                    parts = [{"type": "text", "text": messages[i]["content"]}]
                    for img in request.images:
                        b64 = base64.b64encode(img.data).decode("ascii")
                        parts.append(
                            {
                                "type": "image_url",
                                "image_url": {"url": f"data:image/png;base64,{b64}"},
                            }
                        )
                    messages[i]["content"] = parts
                    break
        payload = {
            "model": self.model,
            "messages": messages,
            "max_tokens": request.options.max_tokens,
            "temperature": request.options.temperature,
        }
        if request.options.top_logprobs > 0:
            payload["logprobs"] = True
            payload["top_logprobs"] = request.options.top_logprobs
        return payload

    def _post(self, path: str, payload: dict) -> dict:
        try:
            resp = self._client.post(
                f"{self.base_url}{path}", json=payload, headers=self._headers()
            )
        except httpx.HTTPError as e:
            raise TransportError(f"backend {self.backend_id}: {e}") from e
        if resp.status_code != 200:
            raise TransportError(
                f"backend {self.backend_id}: HTTP {resp.status_code}: {resp.text[:500]}"
            )
        return resp.json()

    def complete(self, request: CompletionRequest) -> CompletionResult:
        if request.options.teacher_forced_completion is not None:
            return self._teacher_forced(request)
        data = self._post("/chat/completions", self.build_chat_payload(request))
        choice = data["choices"][0]
        text = choice["message"]["content"] or ""
        first_token_logprobs: dict[str, float] = {}
        lp = choice.get("logprobs")
        if lp and lp.get("content"):
            for entry in lp["content"][0].get("top_logprobs", []):
                tok = entry["token"]
                # keep the max when a server repeats a token string
                cur = first_token_logprobs.get(tok)
                if cur is None or entry["logprob"] > cur:
                    first_token_logprobs[tok] = entry["logprob"]
        usage = data.get("usage") or {}
        return CompletionResult(
            text=text,
            first_token_logprobs=first_token_logprobs,
            usage={
                "prompt_tokens": usage.get("prompt_tokens", 0),
                "completion_tokens": usage.get("completion_tokens", 0),
            },
        )

    def _teacher_forced(self, request: CompletionRequest) -> CompletionResult:
        if not self.supports_echo:
            raise CapabilityError(
                f"backend {self.backend_id} cannot score a provided completion "
                "(supports_echo is false)"
            )
        prompt = request.prompt_text()
        completion = request.options.teacher_forced_completion
        payload = {
            "model": self.model,
            "prompt": prompt + completion,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 1,
            "temperature": 0,
        }
        data = self._post("/completions", payload)
        choice = data["choices"][0]
        lp = choice["logprobs"]
        offsets = lp["text_offset"]
        token_logprobs = lp["token_logprobs"]
        start = len(prompt)
        tail = [
            tl for off, tl in zip(offsets, token_logprobs) if off >= start and tl is not None
        ]
        if not tail:
            raise CapabilityError(
                f"backend {self.backend_id} returned no logprobs for the completion span"
            )
        return CompletionResult(
            text=completion,
            token_logprobs=tail,
            usage={"prompt_tokens": len(offsets) - len(tail), "completion_tokens": len(tail)},
        )
