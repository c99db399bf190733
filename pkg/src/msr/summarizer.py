"""Unified item summaries via three-phase prompting.

full mode: independent text summarization, independent image description,
then a fusion call (3 backend calls per item). text_only mode skips the
image entirely (1 call) and the unified summary is the text summary.
Text-summary and image-description lengths are calibrated by identical
target-word instructions plus at most one corrective re-prompt.
"""

from __future__ import annotations

import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import httpx
from PIL import Image

from .catalog import Item
from .errors import ConfigError, ImageError, MsrError
from .gateway import Gateway
from .prompts import load_template, render
from .request import CompletionOptions, CompletionRequest, ImagePayload, Message
from .tokens import estimate_tokens, truncate_to_tokens

log = logging.getLogger(__name__)

MODES = ("full", "text_only")


@dataclass
class ItemSummary:
    item_id: str
    mode: str
    text_summary: str
    unified_summary: str
    image_description: str | None = None

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "mode": self.mode,
            "text_summary": self.text_summary,
            "image_description": self.image_description,
            "unified_summary": self.unified_summary,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ItemSummary":
        return cls(
            item_id=d["item_id"],
            mode=d["mode"],
            text_summary=d["text_summary"],
            unified_summary=d["unified_summary"],
            image_description=d.get("image_description"),
        )


def load_image_bytes(image_ref: str) -> bytes:
    """Read image bytes from a path or URL and validate they decode."""
    if image_ref.startswith(("http://", "https://")):
        try:
            resp = httpx.get(image_ref, timeout=60.0)
            resp.raise_for_status()
            data = resp.content
        except httpx.HTTPError as e:
            raise ImageError(f"cannot fetch image {image_ref}: {e}") from e
    else:
        path = Path(image_ref)
        if not path.exists():
            raise ImageError(f"image file not found: {image_ref}")
        data = path.read_bytes()
    try:
        Image.open(io.BytesIO(data)).verify()
    except Exception as e:
        raise ImageError(f"unreadable image {image_ref}: {e}") from e
    return data


def _word_count(text: str) -> int:
    return len(text.split())


class ItemSummarizer:
    def __init__(
        self,
        gateway: Gateway,
        templates_dir: str | Path | None = None,
        target_words: int = 80,
        max_tokens: int = 512,
        chars_per_token: float = 4.0,
        length_tolerance: float = 0.5,
        missing_image_policy: str = "fallback",
    ):
        if missing_image_policy not in ("fallback", "error"):
            raise ConfigError(f"bad missing_image_policy {missing_image_policy!r}")
        self.gateway = gateway
        self.target_words = target_words
        self.max_tokens = max_tokens
        self.chars_per_token = chars_per_token
        self.length_tolerance = length_tolerance
        self.missing_image_policy = missing_image_policy
        self._templates = {
            name: load_template(name, templates_dir)
            for name in ("text_summary", "image_description", "fuse")
        }

    def _call(self, role_tag: str, prompt: str, images=None, item_id: str = "") -> str:
        # no tags: identical prompts + image bytes must share a cache entry
        # across item_ids
        req = CompletionRequest(
            role_tag=role_tag,
            messages=[Message("user", prompt)],
            images=list(images or []),
            options=CompletionOptions(max_tokens=self.max_tokens),
        )
        try:
            return self.gateway.complete(req).text
        except MsrError as e:
            raise type(e)(f"item {item_id}: {e}") from e

    def summarize_text(self, item: Item, target_words: int | None = None) -> str:
        if not item.description.strip():
            raise ConfigError(f"item {item.item_id}: empty description")
        prompt = render(
            self._templates["text_summary"],
            description=item.description,
            target_words=target_words or self.target_words,
        )
        return self._call("preference_llm", prompt, item_id=item.item_id)

    def describe_image(self, item: Item, target_words: int | None = None) -> str:
        if not item.image_ref:
            raise ImageError(f"item {item.item_id}: no image_ref")
        data = load_image_bytes(item.image_ref)
        prompt = render(
            self._templates["image_description"],
            target_words=target_words or self.target_words,
        )
        return self._call(
            "item_mllm", prompt, images=[ImagePayload(data)], item_id=item.item_id
        )

    def fuse(self, item: Item, text_summary: str, image_description: str) -> str:
        if not text_summary.strip() or not image_description.strip():
            raise ConfigError(f"item {item.item_id}: fuse inputs must be non-empty")
        prompt = render(
            self._templates["fuse"],
            text_summary=text_summary,
            image_description=image_description,
            target_words=self.target_words,
        )
        fused = self._call("item_mllm", prompt, item_id=item.item_id)
        return truncate_to_tokens(fused, self.max_tokens, self.chars_per_token)

    def _lengths_in_band(self, a: str, b: str) -> bool:
        la, lb = _word_count(a), _word_count(b)
        if max(la, lb) == 0:
            return True
        return abs(la - lb) / max(la, lb) <= self.length_tolerance

    def summarize_item(self, item: Item, mode: str = "full") -> ItemSummary:
        if mode not in MODES:
            raise ConfigError(f"unknown summarize mode {mode!r}")
        if mode == "full" and not item.image_ref:
            if self.missing_image_policy == "error":
                raise ImageError(f"item {item.item_id}: full mode requires image_ref")
            log.warning("item %s has no image; falling back to text_only", item.item_id)
            mode = "text_only"

        text_summary = self.summarize_text(item)
        if mode == "text_only":
            return ItemSummary(
                item_id=item.item_id,
                mode="text_only",
                text_summary=text_summary,
                unified_summary=text_summary,
            )

        image_description = self.describe_image(item)
        if not self._lengths_in_band(text_summary, image_description):
            # one corrective re-prompt steering the image side toward the text length
            image_description = self.describe_image(
                item, target_words=max(1, _word_count(text_summary))
            )
        unified = self.fuse(item, text_summary, image_description)
        return ItemSummary(
            item_id=item.item_id,
            mode="full",
            text_summary=text_summary,
            image_description=image_description,
            unified_summary=unified,
        )

    def summarize_catalog(
        self,
        items: list[Item],
        mode: str,
        out_path: str | Path,
        max_workers: int = 4,
    ) -> dict[str, ItemSummary]:
        """Summarize all items in parallel and persist one record per item.

        Existing records for the same (item_id, mode) are reused, making the
        pass idempotent.
        """
        out_path = Path(out_path)
        existing = read_summaries(out_path) if out_path.exists() else {}
        by_id = {it.item_id: it for it in items}
        done = {}
        for iid, s in existing.items():
            if iid not in by_id:
                continue
            if s.mode == mode:
                done[iid] = s
            elif mode == "full" and s.mode == "text_only" and not by_id[iid].image_ref:
                done[iid] = s  # fallback output is already the best achievable
        todo = [it for it in items if it.item_id not in done]

        results: dict[str, ItemSummary] = dict(done)
        if todo:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                for summary in pool.map(lambda it: self.summarize_item(it, mode), todo):
                    results[summary.item_id] = summary
        write_summaries(results, out_path)
        return results


def write_summaries(summaries: dict[str, ItemSummary], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for iid in sorted(summaries):
            f.write(json.dumps(summaries[iid].to_json(), sort_keys=True) + "\n")


def read_summaries(path: str | Path) -> dict[str, ItemSummary]:
    out: dict[str, ItemSummary] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                s = ItemSummary.from_json(json.loads(line))
                out[s.item_id] = s
    return out
