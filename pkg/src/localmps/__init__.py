"""Locally accurate matrix product state approximations of 1D states."""

from __future__ import annotations

__version__ = "0.1.0"
