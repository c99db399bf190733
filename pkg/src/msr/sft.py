"""Supervised fine-tuning dataset export and loss evaluation.

Export format: line-delimited JSON. The first line is a metadata header
{schema_version, train_ratio, seed, recommended_hyperparams}; every later
line is {id, conversation, images, label, provenance}. The loss of a
backend on exported examples is the negative sum of teacher-forced
per-token log-probabilities of the assistant turn (completion-masked;
`loss_span="full"` scores the user turn as well for the literal reading).
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

from .catalog import Catalog, SplitRecord, derive_seed, sample_negatives
from .errors import ConfigError, DependencyError, IngestError
from .gateway import Gateway
from .preference import PreferenceState
from .prompts import load_template, render
from .request import CompletionOptions, CompletionRequest, ImagePayload, Message
from .summarizer import load_image_bytes

SCHEMA_VERSION = 1

# trainer settings carried in the header for the adapter
RECOMMENDED_HYPERPARAMS = {
    "lora_rank": 8,
    "learning_rate": 2e-5,
    "batch_size": 1,
    "gradient_accumulation_steps": 8,
    "epochs": 10,
}


@dataclass
class SftExample:
    id: str
    conversation: list[dict]
    images: list[str]
    label: str
    provenance: dict

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "conversation": self.conversation,
            "images": self.images,
            "label": self.label,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SftExample":
        return cls(
            id=d["id"],
            conversation=list(d["conversation"]),
            images=list(d.get("images") or []),
            label=d["label"],
            provenance=dict(d.get("provenance") or {}),
        )


def _make_example(
    split: SplitRecord,
    preference: PreferenceState,
    catalog: Catalog,
    item_id: str,
    label: str,
    template: str,
) -> SftExample:
    item = catalog.items[item_id]
    prompt = render(
        template,
        preference=preference.summary,
        candidate_description=item.description,
    )
    # split the template's leading instruction into the system turn
    system_text, _, user_text = prompt.partition("\n\n")
    if not user_text:
        system_text, user_text = "", prompt
    conversation = [
        {"role": "system", "text": system_text},
        {"role": "user", "text": user_text},
        {"role": "assistant", "text": label},
    ]
    images = [item.image_ref] if item.image_ref else []
    return SftExample(
        id="",
        conversation=conversation,
        images=images,
        label=label,
        provenance={
            "user_id": split.user_id,
            "item_id": item_id,
            "fold": split.fold,
            "is_negative": label == "no",
        },
    )


def build_sft_dataset(
    splits: list[SplitRecord],
    preferences: dict[str, PreferenceState],
    catalog: Catalog,
    train_ratio: int,
    seed: int,
    out_path: str | Path,
    eval_fold: int | None = None,
    templates_dir: str | Path | None = None,
) -> list[SftExample]:
    """One positive plus train_ratio negatives per training user.

    When eval_fold is given, users evaluated in that fold are excluded so
    the exported set never trains on its own evaluation targets.
    """
    if train_ratio < 1:
        raise ConfigError("train_ratio must be >= 1")
    template = load_template("recommend", templates_dir)
    examples: list[SftExample] = []
    for split in splits:
        if eval_fold is not None and split.fold == eval_fold:
            continue
        pref = preferences.get(split.user_id)
        if pref is None:
            raise DependencyError(
                f"no inferred preference for user {split.user_id}; run infer-preferences first"
            )
        examples.append(
            _make_example(split, pref, catalog, split.target, "yes", template)
        )
        history = set(split.history) | {split.target}
        negatives = sample_negatives(
            history,
            catalog.item_ids(),
            train_ratio,
            derive_seed(seed, "neg-train", split.user_id),
        )
        for neg in negatives:
            examples.append(_make_example(split, pref, catalog, neg, "no", template))

    random.Random(seed).shuffle(examples)
    for i, ex in enumerate(examples):
        ex.id = f"ex-{i:06d}"

    header = {
        "schema_version": SCHEMA_VERSION,
        "train_ratio": train_ratio,
        "seed": seed,
        "recommended_hyperparams": RECOMMENDED_HYPERPARAMS,
    }
    with open(out_path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in examples:
            f.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")
    return examples


def read_sft_dataset(path: str | Path) -> tuple[dict, list[SftExample]]:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines:
        raise IngestError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if "schema_version" not in header:
        raise IngestError(f"{path}: first line is not a metadata header")
    return header, [SftExample.from_json(json.loads(ln)) for ln in lines[1:]]


def example_loss(
    example: SftExample,
    gateway: Gateway,
    loss_span: str = "label",
    max_tokens: int = 512,
    load_images: bool = False,
) -> float:
    """Negative sum of teacher-forced token log-probabilities."""
    if loss_span not in ("label", "full"):
        raise ConfigError(f"unknown loss_span {loss_span!r}")
    turns = example.conversation
    if not turns or turns[-1]["role"] != "assistant":
        raise IngestError(f"example {example.id}: conversation lacks an assistant turn")
    if loss_span == "label":
        prefix = turns[:-1]
        completion = turns[-1]["text"]
    else:
        prefix = [t for t in turns if t["role"] == "system"]
        completion = "\n".join(t["text"] for t in turns if t["role"] != "system")
    images = []
    if load_images:
        images = [ImagePayload(load_image_bytes(ref)) for ref in example.images]
    req = CompletionRequest(
        role_tag="recommender_mllm",
        messages=[Message(t["role"], t["text"]) for t in prefix],
        images=images,
        options=CompletionOptions(
            max_tokens=max_tokens, teacher_forced_completion=completion
        ),
        tags={"example_id": example.id},
    )
    result = gateway.teacher_forced_logprobs(req)
    return -sum(result.token_logprobs)


def eval_sft_loss(
    examples: list[SftExample],
    gateway: Gateway,
    loss_span: str = "label",
    load_images: bool = False,
) -> tuple[dict[str, float], float]:
    """Per-example losses and their mean, reduced in stable id order."""
    if not examples:
        raise ConfigError("no examples to evaluate")
    per_example: dict[str, float] = {}
    for ex in sorted(examples, key=lambda e: e.id):
        per_example[ex.id] = example_loss(
            ex, gateway, loss_span=loss_span, load_images=load_images
        )
    mean = sum(per_example.values()) / len(per_example)
    return per_example, mean
