"""Yes/no first-token candidate scoring.

The interaction probability is the renormalized first-token mass:
p = p_yes / (p_yes + p_no), with each polarity summed over case and
whitespace variants of "yes"/"no" inside the returned top-K distribution.
A missing polarity receives a small floor so p stays inside (0, 1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .catalog import Item
from .errors import ConfigError, ExtractionError
from .gateway import Gateway
from .prompts import load_template, render
from .request import CompletionOptions, CompletionRequest, ImagePayload, Message
from .summarizer import load_image_bytes

FLOOR = 1e-6
POLARITY_POLICIES = ("neutral", "error")


@dataclass
class ScoredCandidate:
    item_id: str
    p_yes_raw: float
    p_no_raw: float
    p: float
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "p_yes_raw": self.p_yes_raw,
            "p_no_raw": self.p_no_raw,
            "p": self.p,
            "diagnostics": self.diagnostics,
        }


def extract_yes_no(
    first_token_logprobs: dict[str, float],
    floor: float = FLOOR,
    policy: str = "neutral",
) -> tuple[float, float, dict]:
    """Sum probability mass over yes/no token variants.

    A token matches a polarity when its trimmed, lowercased form equals
    "yes" or "no". Returns (p_yes_raw, p_no_raw, diagnostics).
    """
    if policy not in POLARITY_POLICIES:
        raise ConfigError(f"unknown missing-polarity policy {policy!r}")
    if not first_token_logprobs:
        raise ExtractionError("empty first-token log-probability map")
    yes_mass = 0.0
    no_mass = 0.0
    matched_yes: list[str] = []
    matched_no: list[str] = []
    for token, logprob in first_token_logprobs.items():
        norm = token.strip().lower()
        if norm == "yes":
            yes_mass += math.exp(logprob)
            matched_yes.append(token)
        elif norm == "no":
            no_mass += math.exp(logprob)
            matched_no.append(token)
    if not matched_yes and not matched_no and policy == "error":
        raise ExtractionError(
            f"neither yes nor no among top tokens: {sorted(first_token_logprobs)[:10]}"
        )
    floor_applied = False
    if yes_mass == 0.0:
        yes_mass = floor
        floor_applied = True
    if no_mass == 0.0:
        no_mass = floor
        floor_applied = True
    diagnostics = {
        "matched_yes_token": sorted(matched_yes),
        "matched_no_token": sorted(matched_no),
        "floor_applied": floor_applied,
    }
    return yes_mass, no_mass, diagnostics


def yes_no_probability(p_yes_raw: float, p_no_raw: float) -> float:
    return p_yes_raw / (p_yes_raw + p_no_raw)


class Recommender:
    def __init__(
        self,
        gateway: Gateway,
        templates_dir: str | Path | None = None,
        top_logprobs: int = 20,
        max_tokens: int = 512,
        floor: float = FLOOR,
        policy: str = "neutral",
        attach_images: bool = True,
    ):
        self.gateway = gateway
        self.top_logprobs = top_logprobs
        self.max_tokens = max_tokens
        self.floor = floor
        self.policy = policy
        self.attach_images = attach_images
        self._template = load_template("recommend", templates_dir)

    def build_prompt(self, preference: str, candidate: Item) -> str:
        return render(
            self._template,
            preference=preference,
            candidate_description=candidate.description,
        )

    def score(self, user_id: str, preference: str, candidate: Item) -> ScoredCandidate:
        if not candidate.description.strip():
            raise ConfigError(f"candidate {candidate.item_id}: empty description")
        images = []
        if self.attach_images and candidate.image_ref:
            images.append(ImagePayload(load_image_bytes(candidate.image_ref)))
        req = CompletionRequest(
            role_tag="recommender_mllm",
            messages=[Message("user", self.build_prompt(preference, candidate))],
            images=images,
            options=CompletionOptions(
                max_tokens=self.max_tokens, top_logprobs=self.top_logprobs
            ),
            tags={"user_id": user_id, "item_id": candidate.item_id},
        )
        result = self.gateway.complete(req)
        p_yes, p_no, diagnostics = extract_yes_no(
            result.first_token_logprobs, floor=self.floor, policy=self.policy
        )
        return ScoredCandidate(
            item_id=candidate.item_id,
            p_yes_raw=p_yes,
            p_no_raw=p_no,
            p=yes_no_probability(p_yes, p_no),
            diagnostics=diagnostics,
        )


def rank_candidates(scored: list[ScoredCandidate]) -> list[ScoredCandidate]:
    """Descending by p; ties break by item_id ascending."""
    if not scored:
        raise ConfigError("rank_candidates requires at least one candidate")
    return sorted(scored, key=lambda s: (-s.p, s.item_id))


def write_scores(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
