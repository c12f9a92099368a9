"""Fingerprint presentation attack detection.

Global whole-image classifier, patch-level local classifier warmed up by
a texture in-painting pretext task, gradient-derived activation maps that
pick the patches worth a second look, and weighted fusion of the three
scores. See README.md for the CLI entry points.
"""

__version__ = "0.1.0"
