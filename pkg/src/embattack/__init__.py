"""Adversarial audio generation in TTS linguistic-embedding space, with a toy TTS and a template-matching recognizer for offline verification."""

__version__ = "0.1.0"
