"""Ranking metrics and fold aggregation.

Per user: one positive against a fixed negative set. AUC is the per-user
pairwise statistic (ties credited 0.5); HR@K and MRR@K come from the
positive's 1-based rank after deterministic tie-breaking by item_id.
Fold means are aggregated with a two-sided 95% t-interval.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from scipy import stats as scipy_stats

from .errors import ConfigError

METRIC_NAMES = ("auc", "hr_at_k", "mrr_at_k")


@dataclass
class UserEvalRecord:
    user_id: str
    positive_score: float
    negative_scores: list[float]
    rank: int

    def __post_init__(self):
        if not self.negative_scores:
            raise ConfigError(f"user {self.user_id}: no negative scores")
        if not (1 <= self.rank <= 1 + len(self.negative_scores)):
            raise ConfigError(f"user {self.user_id}: rank {self.rank} out of range")


def rank_of_positive(
    positive_item: str,
    positive_score: float,
    negatives: list[tuple[str, float]],
) -> int:
    """1-based rank of the positive, ties broken by item_id ascending."""
    rank = 1
    for item_id, score in negatives:
        if score > positive_score or (score == positive_score and item_id < positive_item):
            rank += 1
    return rank


def auc_per_user(record: UserEvalRecord) -> float:
    below = sum(1 for s in record.negative_scores if s < record.positive_score)
    ties = sum(1 for s in record.negative_scores if s == record.positive_score)
    return (below + 0.5 * ties) / len(record.negative_scores)


def hit_rate_at_k(record: UserEvalRecord, k: int) -> float:
    _check_k(record, k)
    return 1.0 if record.rank <= k else 0.0


def mrr_at_k(record: UserEvalRecord, k: int) -> float:
    _check_k(record, k)
    return 1.0 / record.rank if record.rank <= k else 0.0


def _check_k(record: UserEvalRecord, k: int) -> None:
    n_candidates = 1 + len(record.negative_scores)
    if not (1 <= k <= n_candidates):
        raise ConfigError(f"K={k} outside [1, {n_candidates}]")


@dataclass
class FoldMetrics:
    fold: int
    n_users: int
    auc: float
    hr_at_k: float
    mrr_at_k: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EvalReport:
    k: int
    per_fold: list[FoldMetrics]
    mean: dict = field(default_factory=dict)
    half_width: dict = field(default_factory=dict)
    config_fingerprint: str = ""

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "per_fold": [f.to_json() for f in self.per_fold],
            "mean": self.mean,
            "half_width": self.half_width,
            "config_fingerprint": self.config_fingerprint,
        }


def evaluate_fold(fold: int, records: list[UserEvalRecord], k: int) -> FoldMetrics:
    if not records:
        raise ConfigError(f"fold {fold}: no complete user records")
    n = len(records)
    return FoldMetrics(
        fold=fold,
        n_users=n,
        auc=sum(auc_per_user(r) for r in records) / n,
        hr_at_k=sum(hit_rate_at_k(r, k) for r in records) / n,
        mrr_at_k=sum(mrr_at_k(r, k) for r in records) / n,
    )


def _t_half_width(values: list[float], confidence: float = 0.95) -> float:
    n = len(values)
    if n < 2:
        return 0.0
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    if var == 0.0:
        return 0.0
    t = scipy_stats.t.ppf(0.5 + confidence / 2, df=n - 1)
    return float(t * math.sqrt(var / n))


def aggregate(
    fragments: list[FoldMetrics], k: int, config_fingerprint: str = ""
) -> EvalReport:
    """Unweighted mean over fold means plus 95% t half-widths."""
    if not fragments:
        raise ConfigError("no fold metrics to aggregate")
    fragments = sorted(fragments, key=lambda f: f.fold)
    report = EvalReport(k=k, per_fold=fragments, config_fingerprint=config_fingerprint)
    for name in METRIC_NAMES:
        values = [getattr(f, name) for f in fragments]
        report.mean[name] = sum(values) / len(values)
        report.half_width[name] = _t_half_width(values)
    return report


def render_report(report: EvalReport) -> str:
    """Aligned plain-text table; values shown in [0,1] and x100."""
    k = report.k
    headers = ["fold", "users", "AUC", f"HR@{k}", f"MRR@{k}"]
    rows = [
        [
            str(f.fold),
            str(f.n_users),
            f"{f.auc:.4f}",
            f"{f.hr_at_k:.4f}",
            f"{f.mrr_at_k:.4f}",
        ]
        for f in report.per_fold
    ]
    rows.append(
        ["mean", "", *[f"{report.mean[m]:.4f}" for m in METRIC_NAMES]]
    )
    rows.append(
        ["95% hw", "", *[f"{report.half_width[m]:.4f}" for m in METRIC_NAMES]]
    )
    rows.append(
        ["mean x100", "", *[f"{100 * report.mean[m]:.2f}" for m in METRIC_NAMES]]
    )
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(r)))
    return "\n".join(lines)


def write_report(report: EvalReport, json_path: str | Path, text_path: str | Path) -> None:
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(render_report(report) + "\n")
