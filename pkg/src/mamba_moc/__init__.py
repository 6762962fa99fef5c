"""Multicategory object counting with context-aware state-space models."""
__version__ = "0.1.0"
