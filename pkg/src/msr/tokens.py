"""Tokenizer-agnostic length budgeting.

Backends bring their own tokenizers, so budgets are enforced on a
character-count estimate (default 4 chars per token).
"""

import math

DEFAULT_CHARS_PER_TOKEN = 4.0


def estimate_tokens(text: str, chars_per_token: float = DEFAULT_CHARS_PER_TOKEN) -> int:
    if not text:
        return 0
    return max(1, math.ceil(len(text) / chars_per_token))


def truncate_to_tokens(text: str, max_tokens: int, chars_per_token: float = DEFAULT_CHARS_PER_TOKEN) -> str:
    """Cut text so its estimate fits max_tokens, at a word boundary when possible."""
    budget = int(max_tokens * chars_per_token)
    if len(text) <= budget:
        return text
    cut = text[:budget]
    if " " in cut:
        cut = cut.rsplit(" ", 1)[0]
    return cut
