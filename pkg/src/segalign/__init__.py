"""Segment-level video retrieval: keyframe indexing, similarity maps and
segment localization by temporal alignment or pattern detection."""

__version__ = "0.1.0"
