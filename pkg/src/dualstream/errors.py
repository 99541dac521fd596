"""Exception hierarchy shared by every module.

Each class carries the process exit status the CLI reports for it.
"""

from __future__ import annotations


class DualStreamError(Exception):
    exit_code = 1


class ConfigError(DualStreamError, ValueError):
    """Invalid hyperparameter, flag, or configuration value."""

    exit_code = 2


class DataError(DualStreamError, ValueError):
    """Missing, unreadable, or inconsistent input data."""

    exit_code = 3


class DimensionError(DualStreamError, ValueError):
    exit_code = 4


class StateError(DualStreamError, RuntimeError):
    exit_code = 4


class NumericError(DualStreamError, FloatingPointError):
    exit_code = 4
