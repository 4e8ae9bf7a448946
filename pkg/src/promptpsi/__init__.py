"""Prompt-conditioned variable-rate compression of IRS phase-shift matrices."""
__version__ = "0.1.0"
