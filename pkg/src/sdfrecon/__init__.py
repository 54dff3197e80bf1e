"""Depth-supervised signed distance field reconstruction.

Trains an implicit signed distance field plus a surface light field from
posed images with per-view depth, confidence and feature maps, then extracts,
trims and evaluates a triangle mesh. Ships with a synthetic scene generator
that stands in for an external multi-view stereo system.
"""

__version__ = "0.1.0"
