"""Observation-aliased point-mass tasks and a history-conditioned flow-matching chunk policy."""

__version__ = "0.1.0"
