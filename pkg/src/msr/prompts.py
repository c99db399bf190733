"""Prompt template loading.

Templates are plain text files with {placeholder} markers. Substitution is
literal string replacement of known placeholders so braces inside item
descriptions cannot break rendering. User-supplied template directories
override the packaged defaults file by file.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .errors import ConfigError

TEMPLATE_NAMES = (
    "text_summary",
    "image_description",
    "fuse",
    "initial_preference",
    "update_preference",
    "compress_preference",
    "recommend",
)


def load_template(name: str, templates_dir: str | Path | None = None) -> str:
    if name not in TEMPLATE_NAMES:
        raise ConfigError(f"unknown template {name!r}")
    if templates_dir is not None:
        path = Path(templates_dir) / f"{name}.txt"
        if path.exists():
            return path.read_text(encoding="utf-8")
    ref = resources.files("msr") / "templates" / f"{name}.txt"
    return ref.read_text(encoding="utf-8")


def render(template: str, **values) -> str:
    out = template
    for key, val in values.items():
        out = out.replace("{" + key + "}", str(val))
    return out.strip()
