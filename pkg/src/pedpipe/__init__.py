"""Desk-scale medical-assistant LM pipeline and evaluation toolkit."""

__version__ = "0.1.0"
