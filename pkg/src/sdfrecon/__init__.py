"""Clothed-shape reconstruction from uncalibrated orthographic views.

Pipeline: fit a skinned parametric body to silhouettes and keypoints across
views (self-calibration), refine the body's signed distance field into a
clothed-surface SDF with a small learned module, fuse per-view features with
occlusion-aware weights, and extract watertight meshes evaluated by
Chamfer/P2S.
"""

__version__ = "0.1.0"
