"""Neural implicit occupancy fields for interacting two-hand scenes.

The package covers the full desk-scale pipeline: synthetic capsule-hand scene
generation with an exact analytic occupancy oracle, per-hand articulated
occupancy estimation, context-aware two-hand occupancy refinement, optional
keypoint refinement, stage-wise training, mesh extraction, and evaluation
metrics.
"""

__version__ = "0.1.0"
