"""Decoupling-field solver for mean-field FBSDEs with mean-dependent coefficients."""

from __future__ import annotations

__version__ = "0.1.0"
