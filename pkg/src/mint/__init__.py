"""Two-stage audio-language pre-training with a query-based bridging network."""

__version__ = "0.1.0"
