import json

import pytest
from msr.catalog import Catalog, Item, SplitRecord
from msr.preference import PreferenceState
from msr.sft import build_sft_dataset


def export_dataset(tmp_path, n_users=8, n_items=50, train_ratio=1, with_images=False):
    """Build a dataset file through the exporter, exactly as the pipeline
    writes it. This file format is the contract between the two packages."""
    image = tmp_path / "img.png"
    if with_images:
        # minimal valid 1x1 PNG
        image.write_bytes(
            bytes.fromhex(
                "89504e470d0a1a0a0000000d4948445200000001000000010802000000907753"
                "de0000000c49444154789c626000000002000148afa4710000000049454e44ae"
                "426082"
            )
        )
    items = {
        f"i{k:03d}": Item(
            item_id=f"i{k:03d}",
            description=f"item {k}",
            image_ref=str(image) if with_images else None,
        )
        for k in range(n_items)
    }
    catalog = Catalog(items=items, interactions=[])
    splits, prefs = [], {}
    for u in range(n_users):
        uid = f"u{u:03d}"
        history = [f"i{(u * 5 + j) % n_items:03d}" for j in range(4)]
        splits.append(
            SplitRecord(
                fold=u % 5,
                user_id=uid,
                history=history,
                target=f"i{(u * 5 + 4) % n_items:03d}",
                negatives=[],
            )
        )
        prefs[uid] = PreferenceState(
            user_id=uid,
            block_index=1,
            summary=f"user {uid} favors mid-range gear",
            estimated_tokens=7,
        )
    out = tmp_path / "sft_train.jsonl"
    build_sft_dataset(splits, prefs, catalog, train_ratio, seed=11, out_path=out)
    return out


@pytest.fixture
def dataset_path(tmp_path):
    return export_dataset(tmp_path)


def rewrite_records(path, mutate):
    """Apply mutate(record) to every data line; returns the same path."""
    lines = path.read_text().splitlines()
    out = [lines[0]]
    for line in lines[1:]:
        rec = json.loads(line)
        mutate(rec)
        out.append(json.dumps(rec))
    path.write_text("\n".join(out) + "\n")
    return path
