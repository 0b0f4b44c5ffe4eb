"""Multi-speaker buffer-decoder TTS with a feed-forward speaker-fitting encoder.

Operates on vocoder-feature sequences (no raw audio); see README.md for the
pipeline: corpus generation, two-phase training, feed-forward fitting,
synthesis, priming, and the evaluation harness.
"""

__version__ = "0.1.0"
