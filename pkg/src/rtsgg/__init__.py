"""Desk-scale real-time scene-graph relation head on synthetic geometric scenes."""
__version__ = "0.1.0"
