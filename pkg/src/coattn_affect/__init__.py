"""Co-attention regression of continuous valence and arousal from visual, audio and text streams."""

__version__ = "0.1.0"
