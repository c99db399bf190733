import io
import json
import random

import pytest
from PIL import Image

from msr.cache import ResponseCache
from msr.catalog import Catalog, Interaction, Item
from msr.gateway import Gateway
from msr.mock import MockBackend
from msr.request import ROLE_TAGS


def make_png(color=(200, 30, 30), size=(8, 8)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", size, color).save(buf, format="PNG")
    return buf.getvalue()


def write_dataset(
    tmp_path,
    n_users=20,
    n_items=40,
    interactions_per_user=6,
    seed=7,
    with_images=False,
):
    """Deterministic synthetic dataset; every user gets distinct items so
    sequences keep their full length."""
    rng = random.Random(seed)
    items_path = tmp_path / "items.jsonl"
    inter_path = tmp_path / "interactions.jsonl"
    img_dir = tmp_path / "images"
    if with_images:
        img_dir.mkdir(exist_ok=True)
    with open(items_path, "w") as f:
        for i in range(n_items):
            rec = {
                "item_id": f"i{i:04d}",
                "description": f"Item number {i}: a {rng.choice(['red', 'blue', 'green'])} "
                f"{rng.choice(['gadget', 'book', 'game', 'toy'])} with feature f{i}",
            }
            if with_images:
                path = img_dir / f"i{i:04d}.png"
                path.write_bytes(make_png(color=(i * 13 % 256, i * 7 % 256, 90)))
                rec["image_ref"] = str(path)
            f.write(json.dumps(rec) + "\n")
    with open(inter_path, "w") as f:
        for u in range(n_users):
            chosen = rng.sample(range(n_items), interactions_per_user)
            for t, i in enumerate(chosen):
                f.write(
                    json.dumps(
                        {
                            "user_id": f"u{u:04d}",
                            "item_id": f"i{i:04d}",
                            "timestamp": 1000 + t * 60,
                        }
                    )
                    + "\n"
                )
    return inter_path, items_path


def make_catalog(n_items=30) -> Catalog:
    items = {
        f"i{i:03d}": Item(item_id=f"i{i:03d}", description=f"item {i}")
        for i in range(n_items)
    }
    return Catalog(items=items, interactions=[])


def mock_gateway(tmp_path=None, cache=True, **mock_kwargs):
    backend = MockBackend(**mock_kwargs)
    response_cache = ResponseCache(tmp_path / "cache") if (cache and tmp_path) else None
    gw = Gateway({role: backend for role in ROLE_TAGS}, cache=response_cache)
    return gw, backend


@pytest.fixture
def gateway_and_backend(tmp_path):
    return mock_gateway(tmp_path)
