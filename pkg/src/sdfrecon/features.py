"""Pixel-aligned 2D features and space-aligned 3D features.

Learned convolutional encoders are replaced by rendered geometric channels
(mask, depth, camera-space normals, foreground distance transform) and
vertex splats (offset, normal, body-part one-hot); trainable affine
embeddings restore the 256/128-dimensional interfaces downstream networks
expect.

Feature images serialize as magic ``SESF``, u32 C, H, W, then little-endian
f32 planes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .calib import ViewRig, render_depth_buffers
from .geometry import Bvh, TriangleMesh, signed_distance_batch
from .sampling import distance_encode

__all__ = [
    "FeatureImage",
    "FeatureVolume",
    "ViewSet",
    "PIXEL_CHANNELS",
    "VOLUME_CHANNELS",
    "render_feature_image",
    "sample_pixel_channels",
    "sample_pixel_feature",
    "splat_volume",
    "sample_space_feature",
    "assemble_point_feature",
    "save_feature_image",
    "load_feature_image",
]

PIXEL_CHANNELS = ("mask", "depth", "normal_x", "normal_y", "normal_z", "fg_distance")
# Volume cell: hit flag, mean offset to cell center, mean normal, part one-hot.
VOLUME_CHANNELS = 1 + 3 + 3 + 16


@dataclass
class FeatureImage:
    """Per-view raster of geometric channels, C x H x W.

    The depth channel is finite only where mask = 1 (+inf elsewhere); the
    foreground distance transform is in units of image width and becomes a
    +inf sentinel when the mask is empty.
    """

    channels: np.ndarray  # (C, H, W)
    names: tuple = PIXEL_CHANNELS

    @property
    def shape(self):
        return self.channels.shape


@dataclass
class FeatureVolume:
    """D^3 grid of splatted vertex features over inflated body bounds."""

    values: np.ndarray  # (D, D, D, VOLUME_CHANNELS)
    bounds: tuple       # (lo, hi)

    @property
    def resolution(self):
        return self.values.shape[0]


def render_feature_image(mesh: TriangleMesh, rig: ViewRig) -> FeatureImage:
    """Rasterize mask, depth, camera-space normals and the mask's EDT."""
    zbuf, fid, bu, bv = render_depth_buffers(mesh, rig)
    h, w = zbuf.shape
    mask = (fid >= 0)
    chans = np.zeros((len(PIXEL_CHANNELS), h, w))
    chans[0] = mask
    depth = np.where(mask, zbuf, np.inf)
    chans[1] = depth

    if mask.any():
        rows, cols = np.nonzero(mask)
        faces = fid[rows, cols]
        tri = mesh.faces[faces]
        vn = mesh.vertex_normals
        u = bu[rows, cols][:, None]
        v = bv[rows, cols][:, None]
        n = vn[tri[:, 0]] * u + vn[tri[:, 1]] * v + vn[tri[:, 2]] * (1.0 - u - v)
        lens = np.linalg.norm(n, axis=1)
        lens[lens == 0] = 1.0
        n = (n / lens[:, None]) @ rig.rotation.T
        for k in range(3):
            chans[2 + k][rows, cols] = n[:, k]
        dt = np.empty((h, w))
        _kernels.edt_2d(mask.astype(np.uint8), dt)
        chans[5] = dt / w
    else:
        chans[5] = np.inf
    return FeatureImage(channels=chans)


def sample_pixel_channels(img: FeatureImage, u, v):
    """Bilinear channel lookup at continuous pixel coordinates.

    Non-finite channel values (background depth, empty-mask sentinel) enter
    the interpolation as zeros, and samples outside the image are all-zero,
    so downstream consumers always see finite numbers.
    """
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    c, h, w = img.channels.shape
    out = np.zeros((len(u), c))
    # Sample space: pixel (i, j) holds the value at center (i + 0.5, j + 0.5).
    x = u - 0.5
    y = v - 0.5
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1) & np.isfinite(x) & np.isfinite(y)
    if not valid.any():
        return out
    xi = np.clip(np.floor(x[valid]).astype(np.int64), 0, w - 2)
    yi = np.clip(np.floor(y[valid]).astype(np.int64), 0, h - 2)
    fx = (x[valid] - xi)[:, None]
    fy = (y[valid] - yi)[:, None]
    planes = np.where(np.isfinite(img.channels), img.channels, 0.0)
    c00 = planes[:, yi, xi].T
    c10 = planes[:, yi, xi + 1].T
    c01 = planes[:, yi + 1, xi].T
    c11 = planes[:, yi + 1, xi + 1].T
    out[valid] = (
        c00 * (1 - fx) * (1 - fy)
        + c10 * fx * (1 - fy)
        + c01 * (1 - fx) * fy
        + c11 * fx * fy
    )
    return out


def sample_pixel_feature(img: FeatureImage, embed, u, v):
    """Bilinear channels pushed through a trainable affine embedding.

    ``embed`` is a (weight, bias) pair mapping C channels to the embedded
    feature width (256 by default downstream).
    """
    weight, bias = embed
    return sample_pixel_channels(img, u, v) @ np.asarray(weight).T + np.asarray(bias)


def volume_bounds(mesh: TriangleMesh, inflate: float = 0.15):
    lo, hi = mesh.bounds()
    pad = inflate * (hi - lo)
    return lo - pad, hi + pad


def splat_volume(mesh: TriangleMesh, part_labels, bounds=None, resolution: int = 64) -> FeatureVolume:
    """Average per-vertex features into lattice cells.

    Per-vertex feature: offset to the containing cell's center, vertex
    normal, one-hot body-part label. Cells without vertices stay zero with a
    zero hit flag; vertices outside the bounds are clamped with a warning.
    """
    import warnings

    if bounds is None:
        bounds = volume_bounds(mesh)
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    labels = np.asarray(part_labels, dtype=np.int64)
    n_parts = VOLUME_CHANNELS - 7
    if labels.max() >= n_parts:
        raise ValueError(f"part label {labels.max()} exceeds {n_parts - 1}")
    d = resolution
    cell = (hi - lo) / d
    idx = np.floor((mesh.vertices - lo) / cell).astype(np.int64)
    if (idx < 0).any() or (idx >= d).any():
        warnings.warn("vertices outside volume bounds were clamped")
        idx = np.clip(idx, 0, d - 1)
    centers = lo + (idx + 0.5) * cell
    feat = np.zeros((len(mesh.vertices), VOLUME_CHANNELS))
    feat[:, 0] = 1.0
    feat[:, 1:4] = mesh.vertices - centers
    feat[:, 4:7] = mesh.vertex_normals
    feat[np.arange(len(labels)), 7 + labels] = 1.0

    flat = idx[:, 0] * d * d + idx[:, 1] * d + idx[:, 2]
    acc = np.zeros((d * d * d, VOLUME_CHANNELS))
    np.add.at(acc, flat, feat)
    counts = np.bincount(flat, minlength=d * d * d).astype(np.float64)
    nonzero = counts > 0
    acc[nonzero] /= counts[nonzero, None]
    return FeatureVolume(values=acc.reshape(d, d, d, VOLUME_CHANNELS), bounds=(lo, hi))


def sample_space_channels(vol: FeatureVolume, x):
    """Trilinear interpolation of the volume channels; outside -> zeros."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lo, hi = vol.bounds
    d = vol.resolution
    cell = (np.asarray(hi) - lo) / d
    out = np.zeros((len(pts), vol.values.shape[-1]))
    # Continuous cell coordinates with samples at cell centers.
    g = (pts - lo) / cell - 0.5
    valid = ((g >= 0) & (g <= d - 1)).all(axis=1)
    if not valid.any():
        return out
    gi = np.clip(np.floor(g[valid]).astype(np.int64), 0, d - 2)
    f = g[valid] - gi
    vals = vol.values
    acc = np.zeros((valid.sum(), vol.values.shape[-1]))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                wgt = (wx * wy * wz)[:, None]
                acc += wgt * vals[gi[:, 0] + dx, gi[:, 1] + dy, gi[:, 2] + dz]
    out[valid] = acc
    return out


def sample_space_feature(vol: FeatureVolume, embed, x):
    """Trilinear channels through the trainable affine embedding (128 wide)."""
    weight, bias = embed
    return sample_space_channels(vol, x) @ np.asarray(weight).T + np.asarray(bias)


@dataclass
class ViewSet:
    """Calibrated views plus the fitted body everything is measured against."""

    body_mesh: TriangleMesh
    body_bvh: Bvh
    volume: FeatureVolume
    rigs: list
    images: list

    @property
    def n_views(self):
        return len(self.rigs)


def assemble_point_feature(views: ViewSet, x, levels: int = 5):
    """Raw per-view feature tuples for a batch of points.

    Returns a dict with per-view stacks (leading axis = view, ordered by
    view index): pixel channels, per-view depth Z and per-view body normal
    (rotated into each camera frame), plus the view-invariant space
    channels, body signed distance and its encoding.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if views.body_mesh is None:
        raise ValueError("missing body fit")
    d_body, _, _, normals, _ = signed_distance_batch(views.body_bvh, views.body_mesh, pts)
    raw3d = sample_space_channels(views.volume, pts)
    denc = distance_encode(d_body, levels)
    n = views.n_views
    raw2d = np.zeros((n, len(pts), len(PIXEL_CHANNELS)))
    nrm = np.zeros((n, len(pts), 3))
    z = np.zeros((n, len(pts), 1))
    for i, (rig, img) in enumerate(zip(views.rigs, views.images)):
        cam = pts @ rig.rotation.T + rig.translation
        w, h = rig.image_size
        u = rig.ortho_scale * cam[:, 0] + w / 2.0
        v = rig.ortho_scale * cam[:, 1] + h / 2.0
        raw2d[i] = sample_pixel_channels(img, u, v)
        nrm[i] = normals @ rig.rotation.T
        z[i, :, 0] = cam[:, 2]
    return {
        "raw2d": raw2d,       # (n, N, C)
        "raw3d": raw3d,       # (N, 23)
        "d_body": d_body,     # (N,)
        "denc": denc,         # (N, 2L+3)
        "normal": nrm,        # (n, N, 3)
        "z": z,               # (n, N, 1)
    }


def save_feature_image(path, img: FeatureImage):
    c, h, w = img.channels.shape
    with open(path, "wb") as fh:
        fh.write(b"SESF")
        fh.write(struct.pack("<III", c, h, w))
        fh.write(img.channels.astype("<f4").tobytes())


def load_feature_image(path) -> FeatureImage:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"SESF":
            raise ValueError(f"bad magic {magic!r}")
        c, h, w = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(c * h * w * 4), dtype="<f4")
    return FeatureImage(channels=data.reshape(c, h, w).astype(np.float64))
