"""Single-shot color photometric stereo under three uncalibrated near point lights."""

__version__ = "0.1.0"
