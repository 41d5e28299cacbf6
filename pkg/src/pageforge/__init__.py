"""Joint word localisation, transcription and entity tagging on page images."""

__version__ = "0.1.0"
