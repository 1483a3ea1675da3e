"""Chamfer distance and point-to-surface evaluation between meshes."""

from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh, build_bvh, closest_point_batch
from .sampling import sample_surface

__all__ = ["p2s", "chamfer", "eval_protocol", "protocol_csv"]

DEFAULT_SAMPLES = 10000


def p2s(pred: TriangleMesh, gt: TriangleMesh, n_samples: int = DEFAULT_SAMPLES,
        seed: int = 0) -> float:
    """Mean unsigned distance from pred's surface samples to gt's surface."""
    if pred.n_faces == 0 or gt.n_faces == 0:
        raise ValueError("p2s needs two non-empty meshes")
    rng = np.random.default_rng(seed)
    samples = sample_surface(pred, n_samples, rng)
    bvh = build_bvh(gt)
    dist, _, _, _ = closest_point_batch(bvh, gt, samples.points)
    return float(dist.mean())


def chamfer(pred: TriangleMesh, gt: TriangleMesh, n_samples: int = DEFAULT_SAMPLES,
            seed: int = 0) -> float:
    """Symmetric mean of the two directed point-to-surface distances."""
    return 0.5 * (p2s(pred, gt, n_samples, seed) + p2s(gt, pred, n_samples, seed))


def eval_protocol(gt: TriangleMesh, recon_fn, angles, n_samples: int = DEFAULT_SAMPLES,
                  seed: int = 0):
    """Reconstruct per input angle and score against the ground truth.

    ``recon_fn(angle_degrees)`` returns the reconstructed mesh for inputs
    captured at that angle. Returns rows of (angle, chamfer, p2s) plus a
    final ("mean", ...) row.
    """
    rows = []
    for angle in angles:
        mesh = recon_fn(angle)
        rows.append((angle, chamfer(mesh, gt, n_samples, seed), p2s(mesh, gt, n_samples, seed)))
    if rows:
        ch = float(np.mean([r[1] for r in rows]))
        ps = float(np.mean([r[2] for r in rows]))
        rows.append(("mean", ch, ps))
    return rows


def protocol_csv(rows) -> str:
    lines = ["angle,chamfer,p2s"]
    for angle, ch, ps in rows:
        lines.append(f"{angle},{ch:.9g},{ps:.9g}")
    return "\n".join(lines) + "\n"
