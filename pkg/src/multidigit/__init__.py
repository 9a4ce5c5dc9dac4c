"""Multi-character sequence transcription with a factorized softmax head."""

__version__ = "0.1.0"
