"""Source-free domain adaptation for speaker verification on synthetic corpora."""

__version__ = "0.1.0"
