"""Training-point generation and the sinusoidal distance encoding.

Surface batches pair on-mesh points with ground-truth normals; occupancy
batches mix near-surface points (surface + Gaussian offset along the normal)
with uniform points in a bounding box, labeled by the exact inside test.

Sample batches serialize to a flat binary: magic ``SESB``, two u32 counts,
then little-endian f32 records (x, y, z, nx, ny, nz) and (x, y, z, label).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import Bvh, TriangleMesh, signed_distance_batch

__all__ = [
    "SurfaceSamples",
    "OccupancySamples",
    "sample_surface",
    "sample_occupancy",
    "occupancy_gt",
    "occupancy_gt_batch",
    "distance_encode",
    "save_samples",
    "load_samples",
]

DEFAULT_ENCODING_LEVELS = 5


@dataclass(frozen=True)
class SurfaceSamples:
    """Points on the ground-truth surface with their normals."""

    points: np.ndarray   # (N, 3)
    normals: np.ndarray  # (N, 3), unit

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class OccupancySamples:
    """Points in space with binary inside/outside labels."""

    points: np.ndarray  # (N, 3)
    labels: np.ndarray  # (N,), {0, 1}

    def __len__(self):
        return len(self.points)


def sample_surface(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> SurfaceSamples:
    """Uniform area-weighted surface samples with interpolated unit normals."""
    areas = TriangleMesh._face_areas(mesh.vertices, mesh.faces)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    faces = rng.choice(mesh.n_faces, size=count, p=areas / total)
    # Uniform barycentric coordinates via the square-root trick.
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    u = 1.0 - r1
    v = r1 * (1.0 - r2)
    w = r1 * r2
    tri = mesh.faces[faces]
    pts = (
        mesh.vertices[tri[:, 0]] * u[:, None]
        + mesh.vertices[tri[:, 1]] * v[:, None]
        + mesh.vertices[tri[:, 2]] * w[:, None]
    )
    vn = mesh.vertex_normals
    normals = vn[tri[:, 0]] * u[:, None] + vn[tri[:, 1]] * v[:, None] + vn[tri[:, 2]] * w[:, None]
    lens = np.linalg.norm(normals, axis=1)
    lens[lens == 0] = 1.0
    return SurfaceSamples(points=pts, normals=normals / lens[:, None])


def sample_occupancy(
    mesh: TriangleMesh,
    bvh: Bvh,
    count: int,
    sigma: float,
    bounds,
    rng: np.random.Generator,
) -> OccupancySamples:
    """Occupancy batch: 15/16 near-surface offsets, 1/16 uniform in bounds.

    Near-surface points are surface samples pushed along their normal by
    N(0, sigma^2); the remainder is uniform in the axis-aligned ``bounds``
    (pair of corners). Labels come from the exact inside test.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if not (hi > lo).all():
        raise ValueError("degenerate bounds")
    n_uniform = count // 16
    n_near = count - n_uniform
    surf = sample_surface(mesh, n_near, rng)
    offsets = rng.normal(0.0, sigma, size=n_near)
    near = surf.points + surf.normals * offsets[:, None]
    uniform = rng.uniform(lo, hi, size=(n_uniform, 3))
    pts = np.concatenate([near, uniform], axis=0)
    labels = occupancy_gt_batch(bvh, mesh, pts)
    return OccupancySamples(points=pts, labels=labels)


def occupancy_gt_batch(bvh: Bvh, mesh: TriangleMesh, points) -> np.ndarray:
    """Ground-truth occupancy: 1 iff signed distance <= 0 (boundary inside)."""
    if not mesh.is_watertight:
        warnings.warn("occupancy on a non-watertight mesh uses ray parity")
    d, *_ = signed_distance_batch(bvh, mesh, points)
    return (d <= 0.0).astype(np.float64)


def occupancy_gt(bvh: Bvh, mesh: TriangleMesh, x) -> int:
    return int(occupancy_gt_batch(bvh, mesh, np.asarray(x, dtype=np.float64).reshape(1, 3))[0])


def distance_encode(d, levels: int = DEFAULT_ENCODING_LEVELS) -> np.ndarray:
    """Sinusoidal lifting of signed distances into 2*levels + 3 components.

    Layout: (d, sin(2^0 pi d), cos(2^0 pi d), ..., sin(2^L pi d),
    cos(2^L pi d)). Scalars return a vector; (N,) input returns (N, 2L+3).
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    arr = np.asarray(d, dtype=np.float64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty((len(arr), 2 * levels + 3))
    out[:, 0] = arr
    for k in range(levels + 1):
        phase = (2.0 ** k) * np.pi * arr
        out[:, 1 + 2 * k] = np.sin(phase)
        out[:, 2 + 2 * k] = np.cos(phase)
    return out[0] if scalar else out


def default_sigma(mesh: TriangleMesh) -> float:
    """Gaussian offset scale: 5% of the bounding-box diagonal."""
    return 0.05 * mesh.bbox_diagonal()


def default_bounds(mesh: TriangleMesh, inflate: float = 0.10):
    """Ground-truth bbox inflated by ``inflate`` on each side."""
    lo, hi = mesh.bounds()
    pad = inflate * (hi - lo)
    return lo - pad, hi + pad


def save_samples(path, surface: SurfaceSamples, occupancy: OccupancySamples):
    with open(path, "wb") as fh:
        fh.write(b"SESB")
        fh.write(struct.pack("<II", len(surface), len(occupancy)))
        rec = np.concatenate([surface.points, surface.normals], axis=1).astype("<f4")
        fh.write(rec.tobytes())
        rec = np.concatenate([occupancy.points, occupancy.labels[:, None]], axis=1).astype("<f4")
        fh.write(rec.tobytes())


def load_samples(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"SESB":
            raise ValueError(f"bad magic {magic!r}")
        n_s, n_o = struct.unpack("<II", fh.read(8))
        surf = np.frombuffer(fh.read(n_s * 6 * 4), dtype="<f4").reshape(n_s, 6).astype(np.float64)
        occ = np.frombuffer(fh.read(n_o * 4 * 4), dtype="<f4").reshape(n_o, 4).astype(np.float64)
    return (
        SurfaceSamples(points=surf[:, :3], normals=surf[:, 3:]),
        OccupancySamples(points=occ[:, :3], labels=occ[:, 3]),
    )
