"""Run configuration: YAML file plus CLI-flag overrides.

Defaults follow the method's reported settings where stated (block size 3,
512-token cap, train ratio 1:1, eval ratio 1:20, K=5, 5 folds).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

STAGES = (
    "ingest",
    "summarize-items",
    "infer-preferences",
    "build-sft",
    "score",
    "evaluate",
)


@dataclass
class BackendConfig:
    base_url: str = ""
    model: str = ""
    api_key_env: str | None = None
    max_in_flight: int = 4
    max_retries: int = 3
    backoff_s: float = 0.5
    supports_echo: bool = False


@dataclass
class RunConfig:
    interactions_file: str = ""
    items_file: str = ""
    work_dir: str = "work"
    cache_dir: str = "cache"
    templates_dir: str | None = None
    backends: dict[str, BackendConfig] = field(default_factory=dict)

    summarize_mode: str = "full"
    preference_mode: str = "recurrent"
    block_size: int = 3
    summary_length: int = 200
    target_words: int = 80
    max_tokens: int = 512
    chars_per_token: float = 4.0
    top_logprobs: int = 20

    train_ratio: int = 1
    eval_ratio: int = 20
    k: int = 5
    n_folds: int = 5
    seed: int = 42
    min_seq_len: int = 5
    min_user_interactions: int = 5
    min_item_interactions: int = 5

    missing_image_policy: str = "fallback"
    missing_polarity_policy: str = "neutral"
    loss_span: str = "label"
    attach_candidate_images: bool = True
    no_cache: bool = False
    concurrency: int = 4

    mock: bool = False
    mock_behavior: str = "hash_text"
    mock_yes_mass: float = 1.0

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict | None = None) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
        return cls.from_dict(data, overrides)

    @classmethod
    def from_dict(cls, data: dict, overrides: dict | None = None) -> "RunConfig":
        merged = dict(data)
        for key, val in (overrides or {}).items():
            if val is not None:
                merged[key] = val
        backends_raw = merged.pop("backends", {}) or {}
        cfg = cls()
        for key, val in merged.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, val)
        cfg.backends = {}
        for role, bd in backends_raw.items():
            if isinstance(bd, BackendConfig):
                cfg.backends[role] = bd
            else:
                try:
                    cfg.backends[role] = BackendConfig(**bd)
                except TypeError as e:
                    raise ConfigError(f"bad backend config for {role!r}: {e}") from e
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.summarize_mode not in ("full", "text_only"):
            raise ConfigError(f"bad summarize_mode {self.summarize_mode!r}")
        if self.preference_mode not in ("recurrent", "direct"):
            raise ConfigError(f"bad preference_mode {self.preference_mode!r}")
        for name in ("block_size", "summary_length", "target_words", "max_tokens",
                     "train_ratio", "eval_ratio", "k", "seed"):
            if int(getattr(self, name)) < 1 and name != "seed":
                raise ConfigError(f"{name} must be >= 1")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if self.missing_image_policy not in ("fallback", "error"):
            raise ConfigError(f"bad missing_image_policy {self.missing_image_policy!r}")
        if self.missing_polarity_policy not in ("neutral", "error"):
            raise ConfigError(f"bad missing_polarity_policy {self.missing_polarity_policy!r}")
        if self.loss_span not in ("label", "full"):
            raise ConfigError(f"bad loss_span {self.loss_span!r}")
        if self.templates_dir is not None and not Path(self.templates_dir).is_dir():
            raise ConfigError(f"templates_dir does not exist: {self.templates_dir}")

    # --- fingerprints -------------------------------------------------------

    def _semantic_fields(self) -> dict:
        d = asdict(self)
        # operational knobs that cannot change outputs
        for key in ("cache_dir", "no_cache", "concurrency", "work_dir"):
            d.pop(key, None)
        d["backends"] = {
            role: {"model": b.model, "base_url": b.base_url}
            for role, b in self.backends.items()
        }
        if self.mock:
            d["backends"] = {
                "mock": {
                    "behavior": self.mock_behavior,
                    "yes_mass": self.mock_yes_mass,
                    "seed": self.seed,
                }
            }
        return d

    def fingerprint(self) -> str:
        payload = json.dumps(self._semantic_fields(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    # fields each stage's output depends on; sweeps invalidate only the
    # stages downstream of the swept parameter
    _STAGE_FIELDS = {
        "ingest": (
            "interactions_file", "items_file", "min_seq_len",
            "min_user_interactions", "min_item_interactions",
            "n_folds", "seed", "eval_ratio",
        ),
        "summarize-items": (
            "summarize_mode", "target_words", "max_tokens", "chars_per_token",
            "templates_dir", "missing_image_policy",
        ),
        "infer-preferences": (
            "preference_mode", "block_size", "summary_length",
            "max_tokens", "chars_per_token", "templates_dir",
        ),
        "build-sft": ("train_ratio", "seed", "templates_dir"),
        "score": (
            "top_logprobs", "missing_polarity_policy",
            "attach_candidate_images", "templates_dir", "max_tokens",
        ),
        "evaluate": ("k",),
    }

    _STAGE_DEPS = {
        "ingest": (),
        "summarize-items": ("ingest",),
        "infer-preferences": ("ingest", "summarize-items"),
        "build-sft": ("ingest", "infer-preferences"),
        "score": ("ingest", "infer-preferences"),
        "evaluate": ("ingest", "score"),
    }

    def stage_fingerprint(self, stage: str) -> str:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        d = asdict(self)
        payload: dict = {"stage": stage}
        seen = set()
        frontier = [stage]
        while frontier:
            s = frontier.pop()
            if s in seen:
                continue
            seen.add(s)
            payload[s] = {k: d[k] for k in self._STAGE_FIELDS[s]}
            frontier.extend(self._STAGE_DEPS[s])
        sem = self._semantic_fields()
        payload["backends"] = sem["backends"]
        blob = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return self._semantic_fields()
