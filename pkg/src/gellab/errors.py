"""Exception hierarchy.

ConfigError maps to CLI exit code 2 (bad configuration, with the offending
key path), NumericsError to exit code 3 (a numerical pipeline failure with a
module diagnostic).
"""
from __future__ import annotations


class GellabError(Exception):
    pass


class ConfigError(GellabError):
    """Invalid configuration value; `key` is the dotted path to it."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class NumericsError(GellabError):
    """Numerical failure (non-finite values, divergent closure, ...)."""

    def __init__(self, where: str, message: str):
        self.where = where
        super().__init__(f"[{where}] {message}")
