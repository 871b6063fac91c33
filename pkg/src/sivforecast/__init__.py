"""Linked encoder/decoder forecasting with sparse-but-informative auxiliary variables."""
from __future__ import annotations

__version__ = "0.1.0"
