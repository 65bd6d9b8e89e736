"""Run configuration files: line-oriented ``key = value`` under one section
per CLI command, e.g.::

    [train-base]
    epochs = 25
    lr = 0.001

Flags given on the command line override file values.
"""

from __future__ import annotations

import configparser
from pathlib import Path


def load_run_config(path: str | Path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    text = Path(path).read_text()
    parser.read_string(text)
    return {section: dict(parser.items(section)) for section in parser.sections()}


def coerce(text: str):
    """Best-effort typing of a config value: int, float, bool, else string."""
    for caster in (int, float):
        try:
            return caster(text)
        except ValueError:
            pass
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    return text
