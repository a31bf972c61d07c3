"""Grounded video anomaly data pipeline: scene gating, object narration,
anchor-frame grounding, chain-of-thought synthesis, loss math and metrics."""

from __future__ import annotations

__version__ = "0.1.0"
