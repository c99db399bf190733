"""Stage orchestration and run manifests.

Stages run in dependency order: ingest -> summarize-items ->
infer-preferences -> {build-sft, score} -> evaluate. Each stage records a
fingerprint of the config fields it depends on; a completed stage whose
fingerprint still matches is skipped, which makes re-runs no-ops and lets
sweeps reuse upstream artifacts.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import catalog as cat
from .cache import ResponseCache
from .config import STAGES, RunConfig
from .errors import ConfigError, DependencyError, MsrError
from .gateway import Gateway, RetryPolicy
from .http_backend import HttpBackend
from .metrics import (
    UserEvalRecord,
    aggregate,
    evaluate_fold,
    rank_of_positive,
    write_report,
)
from .mock import MockBackend
from .preference import PreferenceEngine, read_preferences, write_preferences
from .recommender import Recommender, write_scores
from .request import ROLE_TAGS
from .sft import build_sft_dataset, eval_sft_loss, read_sft_dataset
from .summarizer import ItemSummarizer, read_summaries

log = logging.getLogger(__name__)


class Artifacts:
    def __init__(self, work_dir: str | Path):
        self.work_dir = Path(work_dir)

    @property
    def catalog(self) -> Path:
        return self.work_dir / "catalog.json"

    @property
    def sequences(self) -> Path:
        return self.work_dir / "sequences.jsonl"

    @property
    def splits(self) -> Path:
        return self.work_dir / "splits.jsonl"

    @property
    def summaries(self) -> Path:
        return self.work_dir / "item_summaries.jsonl"

    @property
    def preferences(self) -> Path:
        return self.work_dir / "preferences.jsonl"

    @property
    def sft_dataset(self) -> Path:
        return self.work_dir / "sft_train.jsonl"

    @property
    def scores(self) -> Path:
        return self.work_dir / "scores.jsonl"

    @property
    def report_json(self) -> Path:
        return self.work_dir / "report.json"

    @property
    def report_text(self) -> Path:
        return self.work_dir / "report.txt"

    @property
    def manifest(self) -> Path:
        return self.work_dir / "manifest.json"


STAGE_OUTPUTS = {
    "ingest": ("catalog", "sequences", "splits"),
    "summarize-items": ("summaries",),
    "infer-preferences": ("preferences",),
    "build-sft": ("sft_dataset",),
    "score": ("scores",),
    "evaluate": ("report_json", "report_text"),
}

STAGE_REQUIRES = {
    "ingest": (),
    "summarize-items": ("ingest",),
    "infer-preferences": ("summarize-items",),
    "build-sft": ("infer-preferences",),
    "score": ("infer-preferences",),
    "evaluate": ("score",),
}


def _atomic_write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    os.replace(tmp, path)


def build_gateway(config: RunConfig, positives: dict[str, str] | None = None) -> Gateway:
    cache = None if config.no_cache else ResponseCache(config.cache_dir)
    if config.mock:
        backend = MockBackend(
            seed=config.seed,
            behavior=config.mock_behavior,
            yes_mass=config.mock_yes_mass,
            positives=positives,
        )
        backends = {role: backend for role in ROLE_TAGS}
        return Gateway(backends, cache=cache, max_in_flight=config.concurrency)
    backends = {}
    limits = {}
    retry = RetryPolicy()
    for role in ROLE_TAGS:
        bc = config.backends.get(role)
        if bc is None:
            continue
        backends[role] = HttpBackend(
            backend_id=role,
            base_url=bc.base_url,
            model=bc.model,
            api_key_env=bc.api_key_env,
            supports_echo=bc.supports_echo,
        )
        limits[role] = bc.max_in_flight
        retry = RetryPolicy(max_attempts=bc.max_retries, base_delay_s=bc.backoff_s)
    if not backends:
        raise ConfigError("no backends configured; declare backends or pass --mock")
    return Gateway(backends, cache=cache, retry=retry, max_in_flight=limits)


class Pipeline:
    def __init__(self, config: RunConfig, gateway: Gateway | None = None):
        self.config = config
        self.paths = Artifacts(config.work_dir)
        self.paths.work_dir.mkdir(parents=True, exist_ok=True)
        self._gateway = gateway

    # --- gateway ------------------------------------------------------------

    @property
    def gateway(self) -> Gateway:
        if self._gateway is None:
            positives = None
            if self.config.mock and self.config.mock_behavior == "oracle_yes":
                positives = self._oracle_positives()
            self._gateway = build_gateway(self.config, positives=positives)
        return self._gateway

    def _oracle_positives(self) -> dict[str, str]:
        """The yes-oracle needs to know each probe user's held-out item."""
        if not self.paths.splits.exists():
            return {}
        return {r.user_id: r.target for r in cat.read_splits(self.paths.splits)}

    # --- manifest -----------------------------------------------------------

    def _load_manifest(self) -> dict:
        if self.paths.manifest.exists():
            with open(self.paths.manifest, "r", encoding="utf-8") as f:
                return json.load(f)
        return {"config_fingerprint": self.config.fingerprint(), "stages": {}}

    def _save_manifest(self, manifest: dict) -> None:
        manifest["config_fingerprint"] = self.config.fingerprint()
        _atomic_write_json(self.paths.manifest, manifest)

    def _outputs_exist(self, stage: str) -> bool:
        return all(getattr(self.paths, attr).exists() for attr in STAGE_OUTPUTS[stage])

    def _require(self, stage: str) -> None:
        for dep in STAGE_REQUIRES[stage]:
            if not self._outputs_exist(dep):
                raise DependencyError(
                    f"stage {stage!r} needs outputs of {dep!r}; run {dep!r} first"
                )

    # --- stage bodies -------------------------------------------------------

    def _load_catalog(self) -> cat.Catalog:
        with open(self.paths.catalog, "r", encoding="utf-8") as f:
            data = json.load(f)
        items = {
            d["item_id"]: cat.Item(
                item_id=d["item_id"],
                description=d["description"],
                image_ref=d.get("image_ref"),
            )
            for d in data["items"]
        }
        interactions = [cat.Interaction(**d) for d in data["interactions"]]
        return cat.Catalog(items=items, interactions=interactions)

    def _stage_ingest(self) -> None:
        c = self.config
        if not c.interactions_file or not c.items_file:
            raise ConfigError("interactions_file and items_file must be set")
        catalog = cat.ingest(
            c.interactions_file,
            c.items_file,
            min_user_interactions=c.min_user_interactions,
            min_item_interactions=c.min_item_interactions,
        )
        sequences = cat.build_sequences(catalog, min_seq_len=c.min_seq_len)
        if not sequences:
            raise ConfigError("no user sequences survive min_seq_len filtering")
        splits = cat.split_leave_one_out(
            sequences, c.n_folds, c.seed, catalog=catalog, eval_ratio=c.eval_ratio
        )
        _atomic_write_json(
            self.paths.catalog,
            {
                "items": [
                    {
                        "item_id": it.item_id,
                        "description": it.description,
                        "image_ref": it.image_ref,
                    }
                    for it in (catalog.items[i] for i in catalog.item_ids())
                ],
                "interactions": [
                    {"user_id": i.user_id, "item_id": i.item_id, "timestamp": i.timestamp}
                    for i in catalog.interactions
                ],
                "stats": catalog.stats.to_json(),
            },
        )
        with open(self.paths.sequences, "w", encoding="utf-8") as f:
            for seq in sequences:
                f.write(
                    json.dumps({"user_id": seq.user_id, "items": list(seq.items)}) + "\n"
                )
        cat.write_splits(splits, self.paths.splits)
        log.info(
            "ingest: %d users, %d items, %d interactions (removed %d users, %d items, %d dupes)",
            catalog.stats.n_users,
            catalog.stats.n_items,
            catalog.stats.n_interactions,
            catalog.stats.users_removed,
            catalog.stats.items_removed,
            catalog.stats.duplicates_removed,
        )

    def _stage_summarize_items(self) -> None:
        c = self.config
        catalog = self._load_catalog()
        summarizer = ItemSummarizer(
            self.gateway,
            templates_dir=c.templates_dir,
            target_words=c.target_words,
            max_tokens=c.max_tokens,
            chars_per_token=c.chars_per_token,
            missing_image_policy=c.missing_image_policy,
        )
        items = [catalog.items[i] for i in catalog.item_ids()]
        summarizer.summarize_catalog(
            items, c.summarize_mode, self.paths.summaries, max_workers=c.concurrency
        )

    def _stage_infer_preferences(self) -> None:
        c = self.config
        summaries = read_summaries(self.paths.summaries)
        engine = PreferenceEngine(
            self.gateway,
            templates_dir=c.templates_dir,
            summary_words=c.summary_length,
            max_tokens=c.max_tokens,
            chars_per_token=c.chars_per_token,
        )
        splits = cat.read_splits(self.paths.splits)

        def infer(split):
            return engine.infer_preference(
                split.user_id,
                split.history,
                summaries,
                mode=c.preference_mode,
                block_size=c.block_size,
            )

        # parallel across users, strictly sequential across blocks per user
        with ThreadPoolExecutor(max_workers=c.concurrency) as pool:
            states = list(pool.map(infer, splits))
        write_preferences({s.user_id: s for s in states}, self.paths.preferences)

    def _stage_build_sft(self) -> None:
        c = self.config
        catalog = self._load_catalog()
        splits = cat.read_splits(self.paths.splits)
        preferences = read_preferences(self.paths.preferences)
        build_sft_dataset(
            splits,
            preferences,
            catalog,
            train_ratio=c.train_ratio,
            seed=c.seed,
            out_path=self.paths.sft_dataset,
            templates_dir=c.templates_dir,
        )

    def _stage_score(self, fold: int | None = None) -> None:
        c = self.config
        catalog = self._load_catalog()
        splits = cat.read_splits(self.paths.splits)
        if fold is not None:
            splits = [s for s in splits if s.fold == fold]
            if not splits:
                raise ConfigError(f"no users in fold {fold}")
        preferences = read_preferences(self.paths.preferences)
        rec = Recommender(
            self.gateway,
            templates_dir=c.templates_dir,
            top_logprobs=c.top_logprobs,
            max_tokens=c.max_tokens,
            policy=c.missing_polarity_policy,
            attach_images=c.attach_candidate_images,
        )

        def score_user(split) -> list[dict] | None:
            pref = preferences.get(split.user_id)
            if pref is None:
                raise DependencyError(
                    f"no preference for user {split.user_id}; run infer-preferences first"
                )
            rows = []
            try:
                for item_id in [split.target, *split.negatives]:
                    scored = rec.score(split.user_id, pref.summary, catalog.items[item_id])
                    rows.append(
                        {
                            "user_id": split.user_id,
                            "fold": split.fold,
                            **scored.to_json(),
                        }
                    )
            except MsrError as e:
                # a failed candidate voids the whole user record
                log.warning("user %s: scoring aborted: %s", split.user_id, e)
                return None
            return rows

        with ThreadPoolExecutor(max_workers=c.concurrency) as pool:
            per_user = list(pool.map(score_user, splits))
        rows = [row for user_rows in per_user if user_rows for row in user_rows]
        write_scores(self.paths.scores, rows)

    def _stage_evaluate(self) -> None:
        c = self.config
        splits = cat.read_splits(self.paths.splits)
        scores: dict[str, dict[str, float]] = {}
        with open(self.paths.scores, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                scores.setdefault(row["user_id"], {})[row["item_id"]] = row["p"]

        by_fold: dict[int, list[UserEvalRecord]] = {}
        for split in splits:
            user_scores = scores.get(split.user_id)
            if user_scores is None:
                continue
            if split.target not in user_scores or any(
                n not in user_scores for n in split.negatives
            ):
                continue
            pos = user_scores[split.target]
            negs = [(n, user_scores[n]) for n in split.negatives]
            record = UserEvalRecord(
                user_id=split.user_id,
                positive_score=pos,
                negative_scores=[s for _, s in negs],
                rank=rank_of_positive(split.target, pos, negs),
            )
            by_fold.setdefault(split.fold, []).append(record)
        if not by_fold:
            raise DependencyError("no complete user records to evaluate; run score first")
        fragments = [
            evaluate_fold(fold, records, c.k) for fold, records in sorted(by_fold.items())
        ]
        report = aggregate(fragments, c.k, config_fingerprint=self.config.fingerprint())
        write_report(report, self.paths.report_json, self.paths.report_text)

    # --- orchestration ------------------------------------------------------

    _STAGE_FNS = {
        "ingest": _stage_ingest,
        "summarize-items": _stage_summarize_items,
        "infer-preferences": _stage_infer_preferences,
        "build-sft": _stage_build_sft,
        "score": _stage_score,
        "evaluate": _stage_evaluate,
    }

    def run_stage(self, stage: str, force: bool = False) -> dict:
        """Run one stage (skipping if already complete); returns its manifest entry."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        manifest = self._load_manifest()
        self._require(stage)
        fp = self.config.stage_fingerprint(stage)
        entry = manifest["stages"].get(stage)
        if (
            not force
            and entry
            and entry.get("fingerprint") == fp
            and entry.get("completed")
            and self._outputs_exist(stage)
        ):
            entry = dict(entry, backend_calls=0, cache_hits=0, skipped=True, wall_s=0.0)
            manifest["stages"][stage] = entry
            self._save_manifest(manifest)
            log.info("stage %s: up to date, skipping", stage)
            return entry
        before = self.gateway.stats_snapshot() if stage != "ingest" else {
            "backend_calls": 0,
            "cache_hits": 0,
        }
        start = time.monotonic()
        self._STAGE_FNS[stage](self)
        wall = time.monotonic() - start
        after = self.gateway.stats_snapshot() if stage != "ingest" else before
        entry = {
            "fingerprint": fp,
            "completed": True,
            "skipped": False,
            "backend_calls": after["backend_calls"] - before["backend_calls"],
            "cache_hits": after["cache_hits"] - before["cache_hits"],
            "wall_s": round(wall, 4),
        }
        manifest["stages"][stage] = entry
        self._save_manifest(manifest)
        return entry

    def run(self, stages: list[str] | None = None, force: bool = False) -> dict:
        for stage in stages or list(STAGES):
            self.run_stage(stage, force=force)
        return self._load_manifest()

    def eval_loss(self, loss_span: str | None = None) -> tuple[dict, float]:
        if not self.paths.sft_dataset.exists():
            raise DependencyError("no SFT dataset; run build-sft first")
        _, examples = read_sft_dataset(self.paths.sft_dataset)
        return eval_sft_loss(
            examples, self.gateway, loss_span=loss_span or self.config.loss_span
        )


SWEEPABLE = {"block_size", "summary_length"}


def sweep(config: RunConfig, parameter: str, values: list[int]) -> list[dict]:
    """One evaluation per value; upstream stages whose fingerprints are
    unaffected by the swept parameter are copied from the base work dir."""
    if parameter not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {parameter!r}; choose one of {sorted(SWEEPABLE)}")
    if not values:
        raise ConfigError("sweep values must be non-empty")
    base_dir = Path(config.work_dir)
    sweep_dir = base_dir / "sweeps" / parameter
    sweep_dir.mkdir(parents=True, exist_ok=True)

    # make sure shared upstream artifacts exist once
    base_pipeline = Pipeline(config)
    for stage in ("ingest", "summarize-items"):
        base_pipeline.run_stage(stage)
    base_manifest = base_pipeline._load_manifest()

    rows: list[dict] = []
    for value in values:
        sub = RunConfig.from_dict(
            {**_config_as_dict(config), parameter: value, "work_dir": str(sweep_dir / str(value))}
        )
        pipeline = Pipeline(sub)
        _copy_reusable_stages(base_pipeline, pipeline, base_manifest)
        row: dict = {"parameter": parameter, "value": value}
        try:
            pipeline.run()
            with open(pipeline.paths.report_json, "r", encoding="utf-8") as f:
                report = json.load(f)
            row["status"] = "ok"
            row["metrics"] = report["mean"]
            row["half_width"] = report["half_width"]
        except MsrError as e:
            log.warning("sweep %s=%s failed: %s", parameter, value, e)
            row["status"] = "failed"
            row["error"] = str(e)
        rows.append(row)

    with open(sweep_dir / "sweep.jsonl", "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    with open(sweep_dir / "sweep.tsv", "w", encoding="utf-8") as f:
        f.write(f"{parameter}\tauc\thr_at_k\tmrr_at_k\tstatus\n")
        for row in rows:
            m = row.get("metrics", {})
            f.write(
                f"{row['value']}\t{m.get('auc', '')}\t{m.get('hr_at_k', '')}\t"
                f"{m.get('mrr_at_k', '')}\t{row['status']}\n"
            )
    return rows


def _config_as_dict(config: RunConfig) -> dict:
    from dataclasses import asdict

    d = asdict(config)
    d["backends"] = dict(config.backends)
    return d


def _copy_reusable_stages(base: Pipeline, target: Pipeline, base_manifest: dict) -> None:
    manifest = target._load_manifest()
    for stage in STAGES:
        entry = base_manifest["stages"].get(stage)
        if not entry or not entry.get("completed"):
            continue
        if entry.get("fingerprint") != target.config.stage_fingerprint(stage):
            continue
        if not base._outputs_exist(stage):
            continue
        for attr in STAGE_OUTPUTS[stage]:
            src = getattr(base.paths, attr)
            dst = getattr(target.paths, attr)
            if not dst.exists():
                shutil.copyfile(src, dst)
        manifest["stages"][stage] = dict(entry, backend_calls=0, cache_hits=0, reused=True)
    target._save_manifest(manifest)
