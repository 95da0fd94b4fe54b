"""avloc: dense audio-visual event localization at desk scale."""

__version__ = "0.1.0"
