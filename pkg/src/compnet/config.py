"""TOML-style config files."""

from __future__ import annotations

try:  # Python >= 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover
    import tomli as _toml


def read_toml(path) -> dict:
    with open(path, "rb") as fh:
        return _toml.load(fh)


def loads(text: str) -> dict:
    return _toml.loads(text)
