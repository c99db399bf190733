"""Multimodal sequential recommendation pipeline.

Stages: ingest -> summarize-items -> infer-preferences -> build-sft ->
score -> evaluate, all driven through pluggable chat-completion backends
with a deterministic mock for offline runs.
"""

__version__ = "0.1.0"
