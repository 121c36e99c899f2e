"""Prompt templates are data files; this module only loads and fills them."""

from __future__ import annotations

import hashlib
import re
from functools import lru_cache
from importlib import resources

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")

CROP_CAPTION = "crop_caption"
AGGREGATE = "aggregate"
BACKGROUND = "background"
REFINE = "refine"
REFINE_NOCONTEXT = "refine_nocontext"
RELATION = "relation"
RELATION_REMINDER = "relation_reminder"
ASSIGN_LABEL = "assign_label"


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    text = resources.files(__package__).joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")
    return text.rstrip("\n")


def render(name: str, **values) -> str:
    """Fill ``{key}`` slots. JSON braces in few-shot examples never match a slot."""
    template = load_prompt(name)
    missing = {m for m in _PLACEHOLDER.findall(template) if m not in values}
    if missing:
        raise KeyError(f"prompt {name!r} needs values for {sorted(missing)}")
    return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]) if m.group(1) in values else m.group(0), template)


def prompt_digest(name: str) -> str:
    return hashlib.sha256(load_prompt(name).encode("utf-8")).hexdigest()
