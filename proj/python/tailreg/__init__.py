"""Regression-bias lab for long-tailed detection (Python bindings)."""

from ._tailreg import *  # noqa: F401,F403

__version__ = "0.1.0"
