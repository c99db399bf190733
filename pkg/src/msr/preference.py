"""Block-wise recurrent user-preference inference.

The history is segmented into fixed-size blocks; the first block seeds an
initial preference summary and every later block refines it, so each call
depends on the previous state (an RNN-shaped prompting chain). Direct mode
collapses the chain into a single call over the whole history.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, DependencyError, SequencingError
from .gateway import Gateway
from .prompts import load_template, render
from .request import CompletionOptions, CompletionRequest, Message
from .summarizer import ItemSummary
from .tokens import estimate_tokens

log = logging.getLogger(__name__)

PREFERENCE_MODES = ("recurrent", "direct")


@dataclass(frozen=True)
class Block:
    index: int
    item_ids: tuple[str, ...]


@dataclass(frozen=True)
class PreferenceState:
    user_id: str
    block_index: int
    summary: str
    estimated_tokens: int

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "block_index": self.block_index,
            "summary": self.summary,
        }


def segment_blocks(history: list[str] | tuple[str, ...], block_size: int) -> list[Block]:
    """ceil(n / block_size) chronological blocks; the remainder forms the
    final short block."""
    if not history:
        raise ConfigError("cannot segment an empty history")
    if block_size < 1:
        raise ConfigError("block_size must be >= 1")
    return [
        Block(index=i, item_ids=tuple(history[start : start + block_size]))
        for i, start in enumerate(range(0, len(history), block_size))
    ]


class PreferenceEngine:
    def __init__(
        self,
        gateway: Gateway,
        templates_dir: str | Path | None = None,
        summary_words: int = 200,
        max_tokens: int = 512,
        chars_per_token: float = 4.0,
    ):
        self.gateway = gateway
        self.summary_words = summary_words
        self.max_tokens = max_tokens
        self.chars_per_token = chars_per_token
        self._templates = {
            name: load_template(name, templates_dir)
            for name in ("initial_preference", "update_preference", "compress_preference")
        }

    def _call(self, prompt: str, user_id: str) -> str:
        req = CompletionRequest(
            role_tag="preference_llm",
            messages=[Message("user", prompt)],
            options=CompletionOptions(max_tokens=self.max_tokens),
            tags={"user_id": user_id},
        )
        return self.gateway.complete(req).text

    def _format_items(self, block: Block, summaries: dict[str, ItemSummary]) -> str:
        lines = []
        for iid in block.item_ids:
            summary = summaries.get(iid)
            if summary is None:
                raise DependencyError(f"no item summary for {iid}; run summarize-items first")
            lines.append(f"- {summary.unified_summary}")
        return "\n".join(lines)

    def _state(self, user_id: str, block_index: int, summary: str) -> PreferenceState:
        return PreferenceState(
            user_id=user_id,
            block_index=block_index,
            summary=summary,
            estimated_tokens=estimate_tokens(summary, self.chars_per_token),
        )

    def infer_initial(
        self, user_id: str, block: Block, summaries: dict[str, ItemSummary]
    ) -> PreferenceState:
        if block.index != 0:
            raise SequencingError(f"initial inference requires block 0, got {block.index}")
        prompt = render(
            self._templates["initial_preference"],
            item_summaries=self._format_items(block, summaries),
            target_words=self.summary_words,
        )
        return self._state(user_id, 0, self._call(prompt, user_id))

    def infer_update(
        self,
        prev: PreferenceState,
        block: Block,
        summaries: dict[str, ItemSummary],
    ) -> PreferenceState:
        if block.index != prev.block_index + 1:
            raise SequencingError(
                f"user {prev.user_id}: expected block {prev.block_index + 1}, got {block.index}"
            )
        previous_summary = prev.summary
        prompt = render(
            self._templates["update_preference"],
            previous_preference=previous_summary,
            item_summaries=self._format_items(block, summaries),
            target_words=self.summary_words,
        )
        if estimate_tokens(prompt, self.chars_per_token) > self.max_tokens:
            previous_summary = self._compress(prev)
            prompt = render(
                self._templates["update_preference"],
                previous_preference=previous_summary,
                item_summaries=self._format_items(block, summaries),
                target_words=self.summary_words,
            )
        return self._state(prev.user_id, block.index, self._call(prompt, prev.user_id))

    def _compress(self, state: PreferenceState) -> str:
        """One extra call shrinking the carried summary to fit the budget."""
        log.info(
            "user %s: preference prompt over %d-token budget at block %d; compressing",
            state.user_id,
            self.max_tokens,
            state.block_index + 1,
        )
        prompt = render(
            self._templates["compress_preference"],
            previous_preference=state.summary,
            target_words=max(20, self.summary_words // 4),
        )
        return self._call(prompt, state.user_id)

    def infer_preference(
        self,
        user_id: str,
        history: list[str] | tuple[str, ...],
        summaries: dict[str, ItemSummary],
        mode: str = "recurrent",
        block_size: int = 3,
    ) -> PreferenceState:
        if mode not in PREFERENCE_MODES:
            raise ConfigError(f"unknown preference mode {mode!r}")
        if mode == "direct":
            block = Block(index=0, item_ids=tuple(history))
            return self.infer_initial(user_id, block, summaries)
        blocks = segment_blocks(history, block_size)
        state = self.infer_initial(user_id, blocks[0], summaries)
        for block in blocks[1:]:
            state = self.infer_update(state, block, summaries)
        return state


def write_preferences(states: dict[str, PreferenceState], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for uid in sorted(states):
            f.write(json.dumps(states[uid].to_json(), sort_keys=True) + "\n")


def read_preferences(path: str | Path) -> dict[str, PreferenceState]:
    out: dict[str, PreferenceState] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            out[d["user_id"]] = PreferenceState(
                user_id=d["user_id"],
                block_index=d["block_index"],
                summary=d["summary"],
                estimated_tokens=estimate_tokens(d["summary"]),
            )
    return out
