"""Conflict-aware feature attribution for small feed-forward networks."""
from __future__ import annotations

from .engine import ConflictConfig, ExplanationResult, explain
from .nn import Activation, ActivationLayer, Linear, Network, forward

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "ActivationLayer",
    "ConflictConfig",
    "ExplanationResult",
    "Linear",
    "Network",
    "explain",
    "forward",
    "__version__",
]
