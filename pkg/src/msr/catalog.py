"""Interaction-log ingestion, per-user sequences, leave-one-out splits,
and seeded negative sampling.

Inputs are line-delimited JSON: interactions {user_id, item_id, timestamp}
and items {item_id, description, image_ref}. Users/items below the
frequency thresholds are removed iteratively until a fixpoint. All
randomized operations are pure functions of (inputs, seed).
"""

from __future__ import annotations

import hashlib
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, IngestError


@dataclass(frozen=True)
class Item:
    item_id: str
    description: str
    image_ref: str | None = None


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class IngestStats:
    raw_interactions: int = 0
    duplicates_removed: int = 0
    users_removed: int = 0
    items_removed: int = 0
    n_users: int = 0
    n_items: int = 0
    n_interactions: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Catalog:
    items: dict[str, Item]
    interactions: list[Interaction]
    stats: IngestStats = field(default_factory=IngestStats)

    def item_ids(self) -> list[str]:
        return sorted(self.items)


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    items: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class SplitRecord:
    """One evaluation user within one fold."""

    fold: int
    user_id: str
    history: list[str]
    target: str
    negatives: list[str]

    def to_json(self) -> dict:
        return {
            "fold": self.fold,
            "user_id": self.user_id,
            "history": self.history,
            "target": self.target,
            "negatives": self.negatives,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SplitRecord":
        return cls(
            fold=d["fold"],
            user_id=d["user_id"],
            history=list(d["history"]),
            target=d["target"],
            negatives=list(d["negatives"]),
        )


def _read_jsonl(path: str | Path, required: tuple[str, ...]) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(f"{path}: malformed line {lineno}: {e}") from e
            missing = [k for k in required if k not in rec]
            if missing:
                raise IngestError(
                    f"{path}: line {lineno} missing field(s) {', '.join(missing)}"
                )
            rec["_line"] = lineno
            records.append(rec)
    return records


def ingest(
    interactions_path: str | Path,
    items_path: str | Path,
    min_user_interactions: int = 5,
    min_item_interactions: int = 5,
) -> Catalog:
    item_recs = _read_jsonl(items_path, ("item_id", "description"))
    items: dict[str, Item] = {}
    for rec in item_recs:
        iid = str(rec["item_id"])
        if iid in items:
            raise IngestError(f"{items_path}: line {rec['_line']}: duplicate item_id {iid!r}")
        desc = rec["description"]
        if not isinstance(desc, str) or not desc.strip():
            raise IngestError(f"{items_path}: line {rec['_line']}: empty description for {iid!r}")
        items[iid] = Item(item_id=iid, description=desc, image_ref=rec.get("image_ref"))

    inter_recs = _read_jsonl(interactions_path, ("user_id", "item_id", "timestamp"))
    if not inter_recs:
        raise IngestError(f"{interactions_path}: no interactions")

    seen: set[tuple[str, str, int]] = set()
    interactions: list[Interaction] = []
    duplicates = 0
    for rec in inter_recs:
        iid = str(rec["item_id"])
        if iid not in items:
            raise IngestError(
                f"{interactions_path}: line {rec['_line']}: unknown item_id {iid!r}"
            )
        try:
            ts = int(rec["timestamp"])
        except (TypeError, ValueError) as e:
            raise IngestError(
                f"{interactions_path}: line {rec['_line']}: bad timestamp {rec['timestamp']!r}"
            ) from e
        if ts < 0:
            raise IngestError(f"{interactions_path}: line {rec['_line']}: negative timestamp")
        triple = (str(rec["user_id"]), iid, ts)
        if triple in seen:
            duplicates += 1
            continue
        seen.add(triple)
        interactions.append(Interaction(*triple))

    stats = IngestStats(raw_interactions=len(inter_recs), duplicates_removed=duplicates)

    # iterative frequency filter to fixpoint
    removed_users: set[str] = set()
    removed_items: set[str] = set()
    while True:
        user_counts = Counter(i.user_id for i in interactions)
        item_counts = Counter(i.item_id for i in interactions)
        bad_users = {u for u, c in user_counts.items() if c < min_user_interactions}
        bad_items = {i for i, c in item_counts.items() if c < min_item_interactions}
        if not bad_users and not bad_items:
            break
        removed_users |= bad_users
        removed_items |= bad_items
        interactions = [
            i
            for i in interactions
            if i.user_id not in bad_users and i.item_id not in bad_items
        ]

    surviving_items = {i.item_id for i in interactions}
    items = {iid: it for iid, it in items.items() if iid in surviving_items}

    stats.users_removed = len(removed_users)
    stats.items_removed = len(removed_items)
    stats.n_users = len({i.user_id for i in interactions})
    stats.n_items = len(items)
    stats.n_interactions = len(interactions)
    if not interactions:
        raise IngestError("no interactions survive frequency filtering")
    return Catalog(items=items, interactions=interactions, stats=stats)


def build_sequences(catalog: Catalog, min_seq_len: int = 5) -> list[UserSequence]:
    """One chronological sequence per surviving user.

    Ties on timestamp break by item_id; consecutive duplicate items are
    collapsed; users shorter than min_seq_len are dropped.
    """
    by_user: dict[str, list[Interaction]] = {}
    for inter in catalog.interactions:
        by_user.setdefault(inter.user_id, []).append(inter)
    sequences = []
    for user_id in sorted(by_user):
        ordered = sorted(by_user[user_id], key=lambda i: (i.timestamp, i.item_id))
        items: list[str] = []
        for inter in ordered:
            if items and items[-1] == inter.item_id:
                continue
            items.append(inter.item_id)
        if len(items) >= min_seq_len:
            sequences.append(UserSequence(user_id=user_id, items=tuple(items)))
    return sequences


def derive_seed(base_seed: int, *parts: str) -> int:
    """Stable per-entity sub-seed, independent of iteration order."""
    h = hashlib.sha256(("|".join([str(base_seed), *parts])).encode()).digest()
    return int.from_bytes(h[:8], "big")


def sample_negatives(
    history: set[str] | frozenset[str],
    catalog_item_ids: list[str],
    ratio: int,
    seed: int,
) -> list[str]:
    """Sample `ratio` distinct items the user never interacted with."""
    if ratio < 1:
        raise ConfigError("negative ratio must be >= 1")
    pool = sorted(set(catalog_item_ids) - set(history))
    if len(pool) < ratio:
        raise IngestError(
            f"insufficient negative pool: need {ratio}, have {len(pool)}"
        )
    return random.Random(seed).sample(pool, ratio)


def split_leave_one_out(
    sequences: list[UserSequence],
    n_folds: int,
    seed: int,
    catalog: Catalog | None = None,
    eval_ratio: int = 20,
) -> list[SplitRecord]:
    """Partition users into n_folds evaluation groups by seeded shuffle;
    each evaluation user's last item is the target, the prefix is history.

    When a catalog is supplied, eval negatives are sampled per user at
    eval_ratio using a per-user derived seed.
    """
    if n_folds < 2:
        raise ConfigError("n_folds must be >= 2")
    if n_folds > len(sequences):
        raise ConfigError(
            f"n_folds={n_folds} exceeds user count {len(sequences)}"
        )
    for seq in sequences:
        if len(seq) < 2:
            raise ConfigError(f"user {seq.user_id}: sequence too short to split")

    user_ids = sorted(s.user_id for s in sequences)
    random.Random(seed).shuffle(user_ids)
    fold_of: dict[str, int] = {}
    base, extra = divmod(len(user_ids), n_folds)
    pos = 0
    for fold in range(n_folds):
        size = base + (1 if fold < extra else 0)
        for uid in user_ids[pos : pos + size]:
            fold_of[uid] = fold
        pos += size

    by_user = {s.user_id: s for s in sequences}
    records = []
    for uid in sorted(by_user):
        seq = by_user[uid]
        negatives: list[str] = []
        if catalog is not None:
            negatives = sample_negatives(
                set(seq.items),
                catalog.item_ids(),
                eval_ratio,
                derive_seed(seed, "neg-eval", uid),
            )
        records.append(
            SplitRecord(
                fold=fold_of[uid],
                user_id=uid,
                history=list(seq.items[:-1]),
                target=seq.items[-1],
                negatives=negatives,
            )
        )
    records.sort(key=lambda r: (r.fold, r.user_id))
    return records


def write_splits(records: list[SplitRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_splits(path: str | Path) -> list[SplitRecord]:
    return [SplitRecord.from_json(d) for d in _read_jsonl(path, ("fold", "user_id", "history", "target"))]
