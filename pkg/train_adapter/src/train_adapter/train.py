"""Parameter-efficient fine-tuning of a vision-language model on the
exported yes/no dataset.

`dry_run` exercises the whole data pipeline (validation, tokenization,
batching, one forward-shape check on a stand-in module) without loading
the base model, without optimization, and without writing weights. Real
training requires transformers + peft and is gated behind an environment
check that runs before any training step.
"""

from __future__ import annotations

import importlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import yaml

from .errors import AdapterError, EnvironmentCheckError
from .validate import load_examples, validate_dataset

log = logging.getLogger(__name__)

# hash-bucket vocabulary for the tokenizer-agnostic dry-run pipeline
DRY_RUN_VOCAB = 32768


@dataclass
class TrainSpec:
    dataset: str
    base_model: str = "llava-hf/llava-v1.6-mistral-7b-hf"
    adapter_rank: int = 8
    learning_rate: float = 2e-5
    batch_size: int = 1
    gradient_accumulation_steps: int = 8
    epochs: int = 10
    output_dir: str = "adapter_out"
    max_length: int = 512

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainSpec":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except FileNotFoundError as e:
            raise AdapterError(f"train config not found: {path}") from e
        if "dataset" not in data:
            raise AdapterError(f"{path}: train config must set 'dataset'")
        known = {k for k in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise AdapterError(f"{path}: unknown train config keys {sorted(unknown)}")
        return cls(**data)


def tokenize(text: str, max_length: int) -> list[int]:
    """Stable whitespace + hash-bucket tokenization for the dry-run path."""
    import hashlib

    ids = []
    for tok in text.split():
        digest = hashlib.sha256(tok.encode()).digest()
        ids.append(int.from_bytes(digest[:4], "big") % DRY_RUN_VOCAB)
    return ids[:max_length]


def build_batches(examples: list[dict], spec: TrainSpec) -> list[dict]:
    """Token-id batches with completion-masked labels: only the assistant
    turn contributes loss positions."""
    batches = []
    rows = []
    for ex in examples:
        prompt = "\n".join(t["text"] for t in ex["conversation"][:-1])
        label = ex["conversation"][-1]["text"]
        prompt_ids = tokenize(prompt, spec.max_length)
        label_ids = tokenize(label, spec.max_length - len(prompt_ids)) or [0]
        input_ids = prompt_ids + label_ids
        loss_mask = [0] * len(prompt_ids) + [1] * len(label_ids)
        rows.append(
            {
                "id": ex["id"],
                "input_ids": input_ids,
                "loss_mask": loss_mask,
                "images": ex["images"],
            }
        )
    for start in range(0, len(rows), spec.batch_size):
        chunk = rows[start : start + spec.batch_size]
        width = max(len(r["input_ids"]) for r in chunk)
        batches.append(
            {
                "ids": [r["id"] for r in chunk],
                "input_ids": torch.tensor(
                    [r["input_ids"] + [0] * (width - len(r["input_ids"])) for r in chunk]
                ),
                "loss_mask": torch.tensor(
                    [r["loss_mask"] + [0] * (width - len(r["loss_mask"])) for r in chunk]
                ),
            }
        )
    return batches


def token_length_histogram(examples: list[dict], spec: TrainSpec) -> dict[str, int]:
    counts: Counter = Counter()
    for ex in examples:
        text = "\n".join(t["text"] for t in ex["conversation"])
        n = len(tokenize(text, spec.max_length))
        bucket = f"{(n // 64) * 64}-{(n // 64) * 64 + 63}"
        counts[bucket] += 1
    return dict(sorted(counts.items(), key=lambda kv: int(kv[0].split("-")[0])))


def _forward_shape_check(batches: list[dict]) -> None:
    """One forward pass through a stand-in module; no weights are saved."""
    embed = torch.nn.Embedding(DRY_RUN_VOCAB, 16)
    head = torch.nn.Linear(16, DRY_RUN_VOCAB)
    batch = batches[0]
    logits = head(embed(batch["input_ids"]))
    expected = (*batch["input_ids"].shape, DRY_RUN_VOCAB)
    if tuple(logits.shape) != expected:
        raise AdapterError(f"forward shape check failed: {tuple(logits.shape)} != {expected}")


def _check_training_environment(spec: TrainSpec) -> None:
    missing = [
        name
        for name in ("transformers", "peft")
        if importlib.util.find_spec(name) is None
    ]
    if missing:
        raise EnvironmentCheckError(
            f"training requires {', '.join(missing)} (pip install 'train-adapter[train]'); "
            "use --dry-run to exercise the data pipeline without them"
        )
    if not torch.cuda.is_available():
        raise EnvironmentCheckError(
            f"no CUDA device available for fine-tuning {spec.base_model}; "
            "use --dry-run on CPU-only machines"
        )


def _emit_noop_adapter(spec: TrainSpec) -> Path:
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "adapter_config.json", "w", encoding="utf-8") as f:
        json.dump(
            {
                "base_model": spec.base_model,
                "adapter_rank": spec.adapter_rank,
                "trained_epochs": 0,
                "spec": asdict(spec),
            },
            f,
            indent=2,
            sort_keys=True,
        )
    torch.save({}, out / "adapter_model.bin")
    return out


def train(spec: TrainSpec, dry_run: bool = False) -> Path | None:
    report = validate_dataset(spec.dataset)
    examples = load_examples(spec.dataset)
    batches = build_batches(examples, spec)
    log.info("dataset ok: %d examples, %d batches", report.n_examples, len(batches))

    if dry_run:
        _forward_shape_check(batches)
        histogram = token_length_histogram(examples, spec)
        print("token-length histogram (64-token buckets):")
        for bucket, count in histogram.items():
            print(f"  {bucket}: {count}")
        print(f"dry run ok: {len(batches)} batches, forward shape check passed")
        return None

    if spec.epochs == 0:
        log.warning("epochs=0: emitting a no-op adapter without training")
        return _emit_noop_adapter(spec)

    _check_training_environment(spec)
    return _run_lora_training(spec, examples)


def _run_lora_training(spec: TrainSpec, examples: list[dict]) -> Path:
    # only reached when transformers/peft and a GPU are present
    from peft import LoraConfig, get_peft_model
    from transformers import AutoModelForVision2Seq, AutoProcessor

    processor = AutoProcessor.from_pretrained(spec.base_model)
    model = AutoModelForVision2Seq.from_pretrained(spec.base_model, torch_dtype=torch.bfloat16)
    model = get_peft_model(model, LoraConfig(r=spec.adapter_rank, task_type="CAUSAL_LM"))
    model = model.cuda().train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=spec.learning_rate)

    from PIL import Image

    step = 0
    for _ in range(spec.epochs):
        for start in range(0, len(examples), spec.batch_size):
            chunk = examples[start : start + spec.batch_size]
            texts, images = [], []
            for ex in chunk:
                texts.append("\n".join(t["text"] for t in ex["conversation"]))
                images.extend(Image.open(p).convert("RGB") for p in ex["images"])
            inputs = processor(
                text=texts,
                images=images or None,
                return_tensors="pt",
                truncation=True,
                max_length=spec.max_length,
                padding=True,
            ).to("cuda")
            out = model(**inputs, labels=inputs["input_ids"])
            (out.loss / spec.gradient_accumulation_steps).backward()
            step += 1
            if step % spec.gradient_accumulation_steps == 0:
                optimizer.step()
                optimizer.zero_grad()

    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save_pretrained(out_dir)
    return out_dir
