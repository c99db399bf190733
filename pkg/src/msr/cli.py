"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 dependency error,
4 backend/transport error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys

import click

from .config import STAGES, RunConfig
from .errors import ConfigError, MsrError
from .pipeline import Pipeline, sweep as run_sweep

log = logging.getLogger(__name__)


def _build_config(ctx_params: dict, extra: dict | None = None) -> RunConfig:
    overrides = {
        k: v
        for k, v in {**ctx_params, **(extra or {})}.items()
        if k not in ("config", "values", "fold", "stages", "parameter") and v is not None
    }
    config_path = ctx_params.get("config")
    if config_path:
        return RunConfig.from_file(config_path, overrides)
    return RunConfig.from_dict({}, overrides)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MsrError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)

    return wrapper


def common_options(fn):
    fn = click.option("--config", type=click.Path(), help="YAML config file")(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--work-dir", "work_dir", type=click.Path(), default=None)(fn)
    fn = click.option("--cache-dir", "cache_dir", type=click.Path(), default=None)(fn)
    fn = click.option(
        "--mock", is_flag=True, default=None, help="use the deterministic mock backend for all roles"
    )(fn)
    fn = click.option("--mock-behavior", "mock_behavior", default=None)(fn)
    fn = click.option("--no-cache", "no_cache", is_flag=True, default=None)(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _run_single_stage(stage: str, params: dict, extra: dict | None = None):
    config = _build_config(params, extra)
    entry = Pipeline(config).run_stage(stage)
    click.echo(json.dumps({stage: entry}, sort_keys=True))


@main.command()
@common_options
@click.option("--interactions", "interactions_file", type=click.Path(), default=None)
@click.option("--items", "items_file", type=click.Path(), default=None)
@handle_errors
def ingest(**params):
    """Ingest interaction logs, build sequences, write splits."""
    _run_single_stage("ingest", params)


@main.command("summarize-items")
@common_options
@click.option("--mode", "summarize_mode", type=click.Choice(["full", "text_only"]), default=None)
@handle_errors
def summarize_items(**params):
    """Produce unified item summaries."""
    _run_single_stage("summarize-items", params)


@main.command("infer-preferences")
@common_options
@click.option("--mode", "preference_mode", type=click.Choice(["recurrent", "direct"]), default=None)
@click.option("--block-size", "block_size", type=int, default=None)
@click.option("--summary-length", "summary_length", type=int, default=None)
@handle_errors
def infer_preferences(**params):
    """Infer per-user preference summaries."""
    _run_single_stage("infer-preferences", params)


@main.command("build-sft")
@common_options
@click.option("--train-ratio", "train_ratio", type=int, default=None)
@handle_errors
def build_sft(**params):
    """Export the supervised fine-tuning dataset."""
    _run_single_stage("build-sft", params)


@main.command("eval-loss")
@common_options
@click.option("--loss-span", "loss_span", type=click.Choice(["label", "full"]), default=None)
@handle_errors
def eval_loss(**params):
    """Evaluate the teacher-forced loss of the configured backend."""
    config = _build_config(params)
    per_example, mean = Pipeline(config).eval_loss()
    click.echo(json.dumps({"mean_loss": mean, "n_examples": len(per_example)}, sort_keys=True))


@main.command()
@common_options
@click.option("--fold", type=int, default=None, help="score only this fold")
@handle_errors
def score(fold: int | None, **params):
    """Score evaluation candidates with the yes/no first-token formula."""
    config = _build_config(params)
    pipeline = Pipeline(config)
    if fold is None:
        entry = pipeline.run_stage("score")
        click.echo(json.dumps({"score": entry}, sort_keys=True))
    else:
        pipeline._require("score")
        pipeline._stage_score(fold)
        click.echo(json.dumps({"score": {"fold": fold, "completed": True}}, sort_keys=True))


@main.command()
@common_options
@click.option("--k", type=int, default=None)
@handle_errors
def evaluate(**params):
    """Compute AUC/HR@K/MRR@K per fold and aggregate."""
    config = _build_config(params)
    pipeline = Pipeline(config)
    pipeline.run_stage("evaluate")
    click.echo(pipeline.paths.report_text.read_text())


@main.command()
@common_options
@click.option(
    "--stages",
    default=None,
    help="comma-separated subset of: " + ", ".join(STAGES),
)
@click.option("--force", is_flag=True, help="re-run stages even if up to date")
@handle_errors
def run(stages: str | None, force: bool, **params):
    """Run the full pipeline (or a subset of stages) in dependency order."""
    config = _build_config(params)
    stage_list = [s.strip() for s in stages.split(",")] if stages else None
    manifest = Pipeline(config).run(stage_list, force=force)
    click.echo(json.dumps(manifest, indent=2, sort_keys=True))


@main.command()
@common_options
@click.argument("parameter", type=click.Choice(["block_size", "summary_length"]))
@click.option("--values", required=True, help="comma-separated integer values")
@handle_errors
def sweep(parameter: str, values: str, **params):
    """Evaluate the pipeline across a parameter range."""
    config = _build_config(params)
    try:
        value_list = [int(v) for v in values.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad sweep values {values!r}") from e
    rows = run_sweep(config, parameter, value_list)
    click.echo(json.dumps(rows, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
