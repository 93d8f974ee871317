"""Prompt templates shipped under ``evolver/prompts``; ``{name}`` placeholders are filled by name."""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

PROMPT_VERSION = "1"
_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


def load_template(name: str, prompt_dir: str | Path | None = None) -> str:
    if prompt_dir is not None:
        return (Path(prompt_dir) / name).read_text(encoding="utf-8")
    return resources.files("evolver").joinpath("prompts", name).read_text(encoding="utf-8")


def render(template: str, /, **values: str) -> str:
    # Only known names are substituted so literal JSON braces survive.
    def sub(m: re.Match) -> str:
        key = m.group(1)
        return str(values[key]) if key in values else m.group(0)

    return _PLACEHOLDER.sub(sub, template)


def split_system_user(text: str) -> tuple[str, str]:
    """Templates hold a system part and a user part separated by a ``---user---`` line."""
    system, sep, user = text.partition("\n---user---\n")
    if not sep:
        raise ValueError("template lacks a ---user--- separator")
    return system.strip(), user.strip()


def prompt_pair(template: str, prompt_dir: str | Path | None = None, /, **values: str) -> tuple[str, str]:
    system, user = split_system_user(load_template(template, prompt_dir))
    return render(system, **values), render(user, **values)
