"""Multi-view feature aggregation.

The primary strategy weights each view by the inverse depth gap between the
query point and the body surface the camera actually sees at that pixel
(occlusion-aware). Average pooling, body-normal weighting and binary
body-visibility pooling are the comparison baselines.

All strategies are convex combinations over views, so every fused component
stays inside the per-view range, and a single view passes through untouched.
"""

from __future__ import annotations

import numpy as np

from .geometry import Bvh, TriangleMesh, closest_point_batch, ray_nearest_hit_batch

__all__ = [
    "occlusion_weight",
    "occlusion_weights",
    "normalize_weights",
    "fuse_weighted",
    "fuse_occlusion_aware",
    "fuse_average",
    "fuse_normal_based",
    "fuse_body_visibility",
    "normal_weights",
    "body_visibility",
    "depth_eps",
]

FUSION_MODES = ("occlusion", "average", "normal", "visibility")


def depth_eps(body_mesh: TriangleMesh) -> float:
    """Floor on |depth gap|: 1e-3 of the body bounding-box diagonal."""
    return 1e-3 * body_mesh.bbox_diagonal()


def _camera_ray_hits(body_bvh, body_mesh, rig, pts):
    """Depth of the body surface the camera sees at each point's pixel.

    Casts the orthographic ray through each point from in front of the body
    (direction +z in camera space) and returns the camera depth of the first
    hit, +inf on a miss.
    """
    fwd = rig.rotation.T @ np.array([0.0, 0.0, 1.0])
    cam_z = pts @ rig.rotation[2] + rig.translation[2]
    lo, hi = body_mesh.bounds()
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    z_lo = (corners @ rig.rotation[2] + rig.translation[2]).min()
    margin = 0.1 * body_mesh.bbox_diagonal() + 1e-6
    t0 = cam_z - z_lo + margin
    origins = pts - t0[:, None] * fwd
    t, face = ray_nearest_hit_batch(body_bvh, body_mesh, origins, np.broadcast_to(fwd, pts.shape))
    hit_z = cam_z - t0 + t
    hit_z[face < 0] = np.inf
    return cam_z, hit_z


def occlusion_weights(body_bvh: Bvh, body_mesh: TriangleMesh, rigs, x, eps=None):
    """Raw per-view weights 1 / max(|Z(x) - Z(first body hit)|, eps).

    A ray that misses the body entirely gets the maximal weight 1/eps (the
    point is off the body silhouette, hence unoccluded by it).
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if eps is None:
        eps = depth_eps(body_mesh)
    w = np.empty((len(pts), len(rigs)))
    for i, rig in enumerate(rigs):
        cam_z, hit_z = _camera_ray_hits(body_bvh, body_mesh, rig, pts)
        gap = np.abs(cam_z - hit_z)
        gap[~np.isfinite(gap)] = eps
        w[:, i] = 1.0 / np.maximum(gap, eps)
    return w


def occlusion_weight(x, rig, body_bvh: Bvh, body_mesh: TriangleMesh, eps=None) -> float:
    """Single-point single-view form of :func:`occlusion_weights`."""
    return float(occlusion_weights(body_bvh, body_mesh, [rig], np.asarray(x, dtype=np.float64).reshape(1, 3), eps)[0, 0])


def normalize_weights(raw):
    """Normalize non-negative per-view weights to sum to 1 per point."""
    raw = np.asarray(raw, dtype=np.float64)
    if (raw < 0).any():
        raise ValueError("weights must be non-negative")
    total = raw.sum(axis=-1, keepdims=True)
    uniform = np.full_like(raw, 1.0 / raw.shape[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total > 0, raw / np.where(total > 0, total, 1.0), uniform)
    return out


def _stack(tuples):
    arr = np.asarray(tuples, dtype=np.float64)
    if arr.ndim == 2:  # (n_views, D) single point
        arr = arr[:, None, :]
    if arr.shape[0] < 1:
        raise ValueError("need at least one view")
    return arr


def fuse_weighted(tuples, weights):
    """Convex combination over views: sum_i w_i F_i / sum_i w_i.

    ``tuples`` is (n_views, N, D) or (n_views, D); ``weights`` is raw
    non-negative (N, n_views) (or (n_views,)) and is normalized here.
    """
    stack = _stack(tuples)
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    w = normalize_weights(w)
    fused = np.einsum("vnd,nv->nd", stack, w)
    return fused[0] if np.asarray(tuples).ndim == 2 else fused


def fuse_occlusion_aware(tuples, weights):
    return fuse_weighted(tuples, weights)


def fuse_average(tuples):
    stack = _stack(tuples)
    n = stack.shape[0]
    w = np.ones((stack.shape[1], n))
    fused = np.einsum("vnd,nv->nd", stack, w / n)
    return fused[0] if np.asarray(tuples).ndim == 2 else fused


def normal_weights(body_bvh: Bvh, body_mesh: TriangleMesh, rigs, x):
    """Front-facing weights tanh(arccos(cos(v_n, v_d))) per view.

    v_n is the nearest body-vertex normal, v_d the view forward direction;
    a zero vector on either side zeroes that view's weight.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, face, _, bary = closest_point_batch(body_bvh, body_mesh, pts)
    corner = np.argmax(bary, axis=1)
    vids = body_mesh.faces[face, corner]
    v_n = body_mesh.vertex_normals[vids]
    w = np.zeros((len(pts), len(rigs)))
    n_len = np.linalg.norm(v_n, axis=1)
    ok = n_len > 0
    for i, rig in enumerate(rigs):
        v_d = rig.rotation.T @ np.array([0.0, 0.0, 1.0])
        cosang = np.zeros(len(pts))
        cosang[ok] = (v_n[ok] @ v_d) / n_len[ok]
        w[ok, i] = np.tanh(np.arccos(np.clip(cosang[ok], -1.0, 1.0)))
    return w


def fuse_normal_based(tuples, weights):
    """Fusion under the normal-based weights (same normalized form)."""
    return fuse_weighted(tuples, weights)


def body_visibility(body_bvh: Bvh, body_mesh: TriangleMesh, rigs, x):
    """True where the nearest body vertex is unoccluded along the view ray."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, face, _, bary = closest_point_batch(body_bvh, body_mesh, pts)
    corner = np.argmax(bary, axis=1)
    vids = body_mesh.faces[face, corner]
    verts = body_mesh.vertices[vids]
    offset = 1e-4 * body_mesh.bbox_diagonal()
    vis = np.zeros((len(pts), len(rigs)), dtype=bool)
    for i, rig in enumerate(rigs):
        toward_image = -(rig.rotation.T @ np.array([0.0, 0.0, 1.0]))
        origins = verts + offset * toward_image
        t, hit_face = ray_nearest_hit_batch(body_bvh, body_mesh, origins,
                                            np.broadcast_to(toward_image, verts.shape))
        vis[:, i] = hit_face < 0
    return vis


def fuse_body_visibility(tuples, visibility):
    """Uniform average over views whose nearest body vertex is visible.

    Points with no visible view fall back to the plain average; the second
    return value flags those points.
    """
    stack = _stack(tuples)
    vis = np.atleast_2d(np.asarray(visibility, dtype=bool))
    fallback = ~vis.any(axis=1)
    w = vis.astype(np.float64)
    w[fallback] = 1.0
    fused = np.einsum("vnd,nv->nd", stack, normalize_weights(w))
    if np.asarray(tuples).ndim == 2:
        return fused[0], bool(fallback[0])
    return fused, fallback
