"""Schema validation for the exported SFT dataset.

The file is line-delimited JSON: a metadata header line
{schema_version, train_ratio, seed, recommended_hyperparams} followed by
records {id, conversation, images, label, provenance}. Labels are
restricted to "yes"/"no" and every referenced image path must resolve.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SchemaError

LABELS = ("yes", "no")
ROLES = ("system", "user", "assistant")
RECORD_FIELDS = ("id", "conversation", "images", "label", "provenance")
HEADER_FIELDS = ("schema_version", "train_ratio", "seed", "recommended_hyperparams")


@dataclass
class DatasetReport:
    path: str
    header: dict
    n_examples: int
    by_label: dict = field(default_factory=dict)
    by_fold: dict = field(default_factory=dict)

    def render(self) -> str:
        lines = [
            f"dataset: {self.path}",
            f"schema_version: {self.header['schema_version']}",
            f"train_ratio: {self.header['train_ratio']}  seed: {self.header['seed']}",
            f"examples: {self.n_examples}",
            "counts by label: "
            + ", ".join(f"{k}: {self.by_label.get(k, 0)}" for k in LABELS),
            "counts by fold: "
            + ", ".join(f"{k}: {v}" for k, v in sorted(self.by_fold.items())),
        ]
        return "\n".join(lines)


def _check_record(rec: dict, lineno: int) -> None:
    rid = rec.get("id", f"<line {lineno}>")
    for key in RECORD_FIELDS:
        if key not in rec:
            raise SchemaError(f"record {rid}: missing field {key!r}")
    if rec["label"] not in LABELS:
        raise SchemaError(f"record {rec['id']}: label {rec['label']!r} not in yes/no")
    conversation = rec["conversation"]
    if not isinstance(conversation, list) or not conversation:
        raise SchemaError(f"record {rec['id']}: conversation must be a non-empty list")
    for turn in conversation:
        if not isinstance(turn, dict) or "role" not in turn or "text" not in turn:
            raise SchemaError(f"record {rec['id']}: malformed conversation turn")
        if turn["role"] not in ROLES:
            raise SchemaError(f"record {rec['id']}: unknown role {turn['role']!r}")
    last = conversation[-1]
    if last["role"] != "assistant":
        raise SchemaError(f"record {rec['id']}: final turn must be the assistant label")
    if last["text"] != rec["label"]:
        raise SchemaError(
            f"record {rec['id']}: assistant turn {last['text']!r} disagrees with label"
        )


def validate_dataset(path: str | Path) -> DatasetReport:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"dataset file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = [(n, ln.strip()) for n, ln in enumerate(f, start=1) if ln.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty file")

    try:
        header = json.loads(lines[0][1])
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: header line is not JSON: {e}") from e
    for key in HEADER_FIELDS:
        if key not in header:
            raise SchemaError(f"{path}: header missing field {key!r}")

    by_label: Counter = Counter()
    by_fold: Counter = Counter()
    missing_images: list[str] = []
    for lineno, line in lines[1:]:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}: line {lineno} is not JSON: {e}") from e
        _check_record(rec, lineno)
        by_label[rec["label"]] += 1
        by_fold[rec["provenance"].get("fold", "?")] += 1
        for ref in rec["images"]:
            if not Path(ref).exists():
                missing_images.append(f"{rec['id']}: {ref}")
    if missing_images:
        shown = "\n  ".join(missing_images[:20])
        raise SchemaError(f"{path}: unresolvable image path(s):\n  {shown}")

    return DatasetReport(
        path=str(path),
        header=header,
        n_examples=len(lines) - 1,
        by_label=dict(by_label),
        by_fold=dict(by_fold),
    )


def load_examples(path: str | Path) -> list[dict]:
    """Parse records after validation has passed."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    return [json.loads(ln) for ln in lines[1:]]
