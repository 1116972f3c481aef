"""Trace-driven simulator for multi-LLM GPU serving with predictive
one-for-many prewarming, evict-aware placement, and page-level memory
switching."""

__version__ = "0.1.0"
