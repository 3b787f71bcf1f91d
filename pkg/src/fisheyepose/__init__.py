"""Fisheye head-pose dataset synthesis and location-guided pose estimation.

The package has three layers: a geometry core (the radial fisheye mapping,
its numerical inverse, and coordinate transport), a synthesis pipeline that
turns flat labeled face images into fisheye-distorted training samples with
polar location labels, and a small training/evaluation stack built on an
in-package reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
