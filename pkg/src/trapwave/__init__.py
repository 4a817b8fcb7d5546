"""Trapped-set dynamics, wave decay and resonances on surfaces of revolution."""
from __future__ import annotations

__version__ = "0.1.0"
