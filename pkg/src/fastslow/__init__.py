"""Dual-system mobile-manipulation stack: trajectory store, deterministic
planar simulator, annotation and quality inspection, IQL offline RL with
hand-derived gradients, a subtask localizer with a strict answer contract,
and a fast/slow orchestration loop with a multi-robot socket service."""

__version__ = "0.1.0"
