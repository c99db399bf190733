"""Content-addressed response cache.

Layout: <root>/<backend>/<model>/<key[:2]>/<key>.json
Writes go to a temp file in the target directory followed by an atomic
rename, so concurrent writers of the same entry never leave a torn file.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

from .request import CompletionRequest, CompletionResult


def cache_key(backend_id: str, model: str, request: CompletionRequest) -> str:
    payload = json.dumps(
        {"backend": backend_id, "model": model, "request": request.canonical()},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ResponseCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, backend_id: str, model: str, key: str) -> Path:
        safe_model = model.replace("/", "_")
        return self.root / backend_id / safe_model / key[:2] / f"{key}.json"

    def get(self, backend_id: str, model: str, key: str) -> CompletionResult | None:
        path = self._path(backend_id, model, key)
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (FileNotFoundError, json.JSONDecodeError):
            return None
        return CompletionResult.from_json(data, cache_hit=True)

    def put(self, backend_id: str, model: str, key: str, result: CompletionResult) -> None:
        path = self._path(backend_id, model, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(result.to_json(), f, sort_keys=True)
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise
