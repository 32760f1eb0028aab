"""Prefix-conditioned neural machine translation on a synthetic image/caption world."""
from __future__ import annotations

__version__ = "0.1.0"
