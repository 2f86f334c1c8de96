"""Personality round-trip pipeline: persona prompts, life-story narratives, blind scoring, and analyses."""

__version__ = "0.1.0"
