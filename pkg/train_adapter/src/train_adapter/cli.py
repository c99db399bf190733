import functools
import logging
import sys

import click

from .errors import AdapterError
from .train import TrainSpec, train
from .validate import validate_dataset


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except AdapterError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)

    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log at INFO level.")
def main(verbose):
    """Validate exported SFT datasets and fine-tune an adapter on them."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.argument("path", type=click.Path())
@handle_errors
def validate(path):
    """Check PATH against the dataset schema and print a summary."""
    report = validate_dataset(path)
    click.echo(report.render())


@main.command(name="train")
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="YAML train config; must set 'dataset'.")
@click.option("--dry-run", is_flag=True,
              help="Run validation, batching, and a forward-shape check only; "
                   "no model download, no weights written.")
@handle_errors
def train_cmd(config_path, dry_run):
    """Fine-tune an adapter on the dataset named in the config."""
    spec = TrainSpec.from_file(config_path)
    out = train(spec, dry_run=dry_run)
    if out is not None:
        click.echo(f"adapter written to {out}")
