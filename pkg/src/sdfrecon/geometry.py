"""Exact triangle-mesh queries: distance, sign, normals, rays.

A :class:`TriangleMesh` plus its :class:`Bvh` answer closest-point, signed
distance and ray queries; every other module treats these as ground truth.
Signs come from angle-weighted pseudonormals, with a ray-parity fallback when
the pseudonormal test is degenerate or the mesh is not watertight.

Meshes and BVHs are immutable after construction; queries are pure.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels

__all__ = [
    "TriangleMesh",
    "Bvh",
    "SdfQuery",
    "RayHit",
    "build_bvh",
    "signed_distance",
    "signed_distance_batch",
    "ray_nearest_hit",
    "compute_vertex_normals",
    "read_obj",
    "write_obj",
]

_LEAF_SIZE = 4
_SAH_BINS = 12

# Deterministic, irrationally oriented directions for parity retries. A ray
# that grazes an edge under one direction is recounted under the next.
_PARITY_DIRS = np.array(
    [
        [0.57735027, 0.57735027, 0.57735027],
        [0.85065081, -0.52573111, 0.0],
        [-0.23907380, 0.66158804, 0.71083279],
        [0.18257419, -0.36514837, 0.91287093],
        [-0.80178373, -0.26726124, 0.53452248],
        [0.48507125, 0.72760688, -0.48507125],
        [-0.37139068, 0.92847669, 0.0],
        [0.66666667, -0.33333333, -0.66666667],
    ]
)


class TriangleMesh:
    """Indexed triangle surface.

    Degenerate faces (area below 1e-12 times the squared bbox diagonal) are
    dropped at construction with a warning. Vertex normals, face normals,
    edge adjacency and the watertightness flag are computed lazily and
    cached; the mesh must not be mutated afterwards.
    """

    def __init__(self, vertices, faces, clean=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if self.faces.size and (self.faces.ndim != 2 or self.faces.shape[1] != 3):
            raise ValueError("faces must be (F, 3)")
        self.faces = self.faces.reshape(-1, 3)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")
        if self.faces.size and self.faces.min() < 0:
            raise ValueError("negative face index")
        if clean and len(self.faces):
            areas = self._face_areas(self.vertices, self.faces)
            thresh = 1e-12 * self.bbox_diagonal() ** 2
            bad = areas < thresh
            if bad.any():
                warnings.warn(f"dropped {int(bad.sum())} degenerate faces")
                self.faces = self.faces[~bad]
        self._vertex_normals = None
        self._face_normals = None
        self._edge_pseudonormals = None
        self._watertight = None

    @staticmethod
    def _face_areas(v, f):
        e1 = v[f[:, 1]] - v[f[:, 0]]
        e2 = v[f[:, 2]] - v[f[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def bounds(self):
        """(min, max) corners of the axis-aligned bounding box."""
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self):
        if not len(self.vertices):
            return 0.0
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def face_corners(self):
        """Vertex positions per face corner: three (F, 3) arrays."""
        v, f = self.vertices, self.faces
        return (
            np.ascontiguousarray(v[f[:, 0]]),
            np.ascontiguousarray(v[f[:, 1]]),
            np.ascontiguousarray(v[f[:, 2]]),
        )

    @property
    def face_normals(self):
        if self._face_normals is None:
            a, b, c = self.face_corners()
            n = np.cross(b - a, c - a)
            lens = np.linalg.norm(n, axis=1)
            lens[lens == 0] = 1.0
            self._face_normals = n / lens[:, None]
        return self._face_normals

    @property
    def vertex_normals(self):
        if self._vertex_normals is None:
            self._vertex_normals = compute_vertex_normals(self)
        return self._vertex_normals

    @property
    def edge_pseudonormals(self):
        """(F, 3, 3) pseudonormal per face edge (edge k is opposite corner k).

        The edge pseudonormal is the normalized sum of the two adjacent face
        normals (each incident face subtends angle pi at an edge). Boundary
        edges keep the single face normal.
        """
        if self._edge_pseudonormals is None:
            self._edge_pseudonormals = self._build_edge_pseudonormals()
        return self._edge_pseudonormals

    def _edge_map(self):
        """sorted (i, j) vertex pair -> list of face indices."""
        edges = {}
        f = self.faces
        for k in range(len(f)):
            i0, i1, i2 = int(f[k, 0]), int(f[k, 1]), int(f[k, 2])
            for a, b in ((i0, i1), (i1, i2), (i2, i0)):
                key = (a, b) if a < b else (b, a)
                edges.setdefault(key, []).append(k)
        return edges

    def _build_edge_pseudonormals(self):
        fn = self.face_normals
        edges = self._edge_map()
        out = np.empty((len(self.faces), 3, 3))
        f = self.faces
        for k in range(len(f)):
            i0, i1, i2 = int(f[k, 0]), int(f[k, 1]), int(f[k, 2])
            # edge 0 = (i1,i2), edge 1 = (i2,i0), edge 2 = (i0,i1)
            for e, (a, b) in enumerate(((i1, i2), (i2, i0), (i0, i1))):
                key = (a, b) if a < b else (b, a)
                n = fn[edges[key]].sum(axis=0)
                ln = np.linalg.norm(n)
                out[k, e] = n / ln if ln > 0 else fn[k]
        return out

    @property
    def is_watertight(self):
        """True when every edge is shared by exactly two faces."""
        if self._watertight is None:
            if not len(self.faces):
                self._watertight = False
            else:
                self._watertight = all(len(fs) == 2 for fs in self._edge_map().values())
        return self._watertight

    def euler_characteristic(self):
        return self.n_vertices - len(self._edge_map()) + self.n_faces

    def transformed(self, rotation=None, translation=None, scale=1.0):
        """New mesh with vertices mapped through scale * R @ v + t."""
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return TriangleMesh(v, self.faces.copy(), clean=False)


@dataclass(frozen=True)
class Bvh:
    """Flat-array bounding volume hierarchy over mesh faces.

    Built with binned surface-area-heuristic splits, leaves hold at most four
    faces. ``left < 0`` marks a leaf referencing
    ``prim_order[start:start+count]``.
    """

    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    prim_order: np.ndarray

    @property
    def n_nodes(self):
        return len(self.left)

    def root_bounds(self):
        return self.node_min[0].copy(), self.node_max[0].copy()


@dataclass(frozen=True)
class SdfQuery:
    """Signed-distance query result (negative inside)."""

    distance: float
    closest_point: np.ndarray
    closest_face: int
    normal: np.ndarray
    sign_reliable: bool = True


@dataclass(frozen=True)
class RayHit:
    t: float
    face: int
    point: np.ndarray


def build_bvh(mesh: TriangleMesh) -> Bvh:
    """Build the hierarchy; queries through it match brute force exactly."""
    if mesh.n_faces == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    a, b, c = mesh.face_corners()
    fmin = np.minimum(np.minimum(a, b), c)
    fmax = np.maximum(np.maximum(a, b), c)
    centroids = (a + b + c) / 3.0

    order = np.arange(mesh.n_faces, dtype=np.int64)
    node_min, node_max = [], []
    left, right, start, count = [], [], [], []

    def new_node(lo, hi):
        node_min.append(lo)
        node_max.append(hi)
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(left) - 1

    # Iterative build over (node index, slice) work items.
    root = new_node(
        fmin[order].min(axis=0) if len(order) else np.zeros(3),
        fmax[order].max(axis=0) if len(order) else np.zeros(3),
    )
    stack = [(root, 0, mesh.n_faces)]
    while stack:
        ni, lo, hi = stack.pop()
        idx = order[lo:hi]
        n = hi - lo
        if n <= _LEAF_SIZE:
            start[ni] = lo
            count[ni] = n
            continue
        split = _sah_split(centroids[idx], fmin[idx], fmax[idx])
        if split is None:
            mid = n // 2
            axis = int(np.argmax(centroids[idx].max(axis=0) - centroids[idx].min(axis=0)))
            part = np.argsort(centroids[idx, axis], kind="stable")
            order[lo:hi] = idx[part]
            mid_at = lo + mid
        else:
            axis, threshold = split
            mask = centroids[idx, axis] <= threshold
            if not mask.any() or mask.all():
                mid = n // 2
                part = np.argsort(centroids[idx, axis], kind="stable")
                order[lo:hi] = idx[part]
                mid_at = lo + mid
            else:
                order[lo:hi] = np.concatenate([idx[mask], idx[~mask]])
                mid_at = lo + int(mask.sum())
        li = order[lo:mid_at]
        ri = order[mid_at:hi]
        lnode = new_node(fmin[li].min(axis=0), fmax[li].max(axis=0))
        rnode = new_node(fmin[ri].min(axis=0), fmax[ri].max(axis=0))
        left[ni] = lnode
        right[ni] = rnode
        stack.append((lnode, lo, mid_at))
        stack.append((rnode, mid_at, hi))

    return Bvh(
        node_min=np.ascontiguousarray(node_min, dtype=np.float64),
        node_max=np.ascontiguousarray(node_max, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        start=np.asarray(start, dtype=np.int32),
        count=np.asarray(count, dtype=np.int32),
        prim_order=np.ascontiguousarray(order, dtype=np.int64),
    )


def _sah_split(cent, fmin, fmax):
    """Best binned SAH (axis, centroid threshold), or None when unsplittable."""
    lo = cent.min(axis=0)
    hi = cent.max(axis=0)
    extent = hi - lo
    best = None
    best_cost = np.inf
    for axis in range(3):
        if extent[axis] <= 0:
            continue
        rel = (cent[:, axis] - lo[axis]) / extent[axis]
        bins = np.minimum((rel * _SAH_BINS).astype(np.int64), _SAH_BINS - 1)
        counts = np.bincount(bins, minlength=_SAH_BINS)
        bmin = np.full((_SAH_BINS, 3), np.inf)
        bmax = np.full((_SAH_BINS, 3), -np.inf)
        for b in range(_SAH_BINS):
            sel = bins == b
            if sel.any():
                bmin[b] = fmin[sel].min(axis=0)
                bmax[b] = fmax[sel].max(axis=0)
        # Sweep prefix/suffix areas.
        lcnt = np.cumsum(counts)[:-1]
        rcnt = lcnt[-1] + counts[-1] - lcnt
        lmin = np.minimum.accumulate(bmin, axis=0)[:-1]
        lmax = np.maximum.accumulate(bmax, axis=0)[:-1]
        rmin = np.minimum.accumulate(bmin[::-1], axis=0)[::-1][1:]
        rmax = np.maximum.accumulate(bmax[::-1], axis=0)[::-1][1:]

        def area(mn, mx):
            d = np.maximum(mx - mn, 0.0)
            return d[:, 0] * d[:, 1] + d[:, 1] * d[:, 2] + d[:, 2] * d[:, 0]

        cost = area(lmin, lmax) * lcnt + area(rmin, rmax) * rcnt
        cost[lcnt == 0] = np.inf
        cost[rcnt == 0] = np.inf
        k = int(np.argmin(cost))
        if cost[k] < best_cost:
            best_cost = cost[k]
            threshold = lo[axis] + extent[axis] * (k + 1) / _SAH_BINS
            best = (axis, threshold)
    return best


def closest_point_batch(bvh: Bvh, mesh: TriangleMesh, points):
    """Closest surface points for a batch of queries.

    Returns (dist, face, point, bary) with bary the (N, 3) barycentric
    coordinates on the closest face.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    a, b, c = mesh.face_corners()
    dist_sq = np.empty(n)
    face = np.empty(n, dtype=np.int64)
    point = np.empty((n, 3))
    u = np.empty(n)
    v = np.empty(n)
    w = np.empty(n)
    _kernels.bvh_closest_points(
        bvh.node_min, bvh.node_max, bvh.left, bvh.right, bvh.start, bvh.count,
        bvh.prim_order, a, b, c, pts, dist_sq, face, point, u, v, w,
    )
    return np.sqrt(dist_sq), face, point, np.stack([u, v, w], axis=1)


# Barycentric tolerance classifying the closest feature as face/edge/vertex.
_FEATURE_EPS = 1e-9


def _feature_pseudonormals(mesh, face, bary):
    """Pseudonormal of the closest feature per query (vectorized)."""
    out = np.empty((len(face), 3))
    near_zero = bary < _FEATURE_EPS
    n_zero = near_zero.sum(axis=1)

    face_sel = n_zero == 0
    if face_sel.any():
        out[face_sel] = mesh.face_normals[face[face_sel]]

    edge_sel = n_zero == 1
    if edge_sel.any():
        # Zero barycentric k means the point lies on the edge opposite corner k.
        k = np.argmax(near_zero[edge_sel], axis=1)
        out[edge_sel] = mesh.edge_pseudonormals[face[edge_sel], k]

    vert_sel = n_zero >= 2
    if vert_sel.any():
        corner = np.argmax(~near_zero[vert_sel], axis=1)
        vids = mesh.faces[face[vert_sel], corner]
        out[vert_sel] = mesh.vertex_normals[vids]
    return out


def _parity_inside(bvh, mesh, points):
    """Ray-parity inside test, retrying marginal rays along fresh directions."""
    pts = np.atleast_2d(points)
    a, b, c = mesh.face_corners()
    inside = np.zeros(len(pts), dtype=bool)
    for i, p in enumerate(pts):
        for d in _PARITY_DIRS:
            cnt, marginal = _kernels.bvh_ray_crossings(
                bvh.node_min, bvh.node_max, bvh.left, bvh.right, bvh.start,
                bvh.count, bvh.prim_order, a, b, c, p, d,
            )
            if not marginal:
                inside[i] = cnt % 2 == 1
                break
        else:
            inside[i] = cnt % 2 == 1
    return inside


def signed_distance_batch(bvh: Bvh, mesh: TriangleMesh, points):
    """Signed distances for a batch of points (negative inside).

    Returns (dist, face, closest_point, normal, reliable). On a watertight
    mesh the sign comes from the angle-weighted pseudonormal at the closest
    feature; queries where that dot product is degenerate, and all queries on
    non-watertight meshes, fall back to ray parity.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    dist, face, cp, bary = closest_point_batch(bvh, mesh, pts)
    normals = _feature_pseudonormals(mesh, face, bary)
    diff = pts - cp
    dots = np.einsum("ij,ij->i", diff, normals)
    reliable = np.ones(len(pts), dtype=bool)

    if mesh.is_watertight:
        signs = np.where(dots < 0, -1.0, 1.0)
        ambiguous = (np.abs(dots) < 1e-6 * dist) & (dist > 0)
        if ambiguous.any():
            signs[ambiguous] = np.where(_parity_inside(bvh, mesh, pts[ambiguous]), -1.0, 1.0)
    else:
        reliable[:] = False
        signs = np.where(_parity_inside(bvh, mesh, pts), -1.0, 1.0)
    return signs * dist, face, cp, normals, reliable


def signed_distance(bvh: Bvh, mesh: TriangleMesh, x) -> SdfQuery:
    """Signed distance from one point to the mesh surface."""
    d, face, cp, normal, reliable = signed_distance_batch(bvh, mesh, np.asarray(x, dtype=np.float64))
    return SdfQuery(
        distance=float(d[0]),
        closest_point=cp[0],
        closest_face=int(face[0]),
        normal=normal[0],
        sign_reliable=bool(reliable[0]),
    )


def ray_nearest_hit(bvh: Bvh, mesh: TriangleMesh, origin, direction):
    """Smallest t >= 0 intersection along the ray, or None on a miss."""
    o = np.ascontiguousarray(origin, dtype=np.float64)
    d = np.ascontiguousarray(direction, dtype=np.float64)
    a, b, c = mesh.face_corners()
    t, face = _kernels.bvh_ray_nearest(
        bvh.node_min, bvh.node_max, bvh.left, bvh.right, bvh.start, bvh.count,
        bvh.prim_order, a, b, c, o, d,
    )
    if face < 0 or not np.isfinite(t):
        return None
    return RayHit(t=float(t), face=int(face), point=o + t * d)


def ray_nearest_hit_batch(bvh: Bvh, mesh: TriangleMesh, origins, directions):
    """Vectorized form of :func:`ray_nearest_hit`: returns (t, face).

    Misses carry t = +inf and face = -1.
    """
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    a, b, c = mesh.face_corners()
    t = np.empty(len(o))
    face = np.empty(len(o), dtype=np.int64)
    _kernels.bvh_ray_nearest_batch(
        bvh.node_min, bvh.node_max, bvh.left, bvh.right, bvh.start, bvh.count,
        bvh.prim_order, a, b, c, o, d, t, face,
    )
    return t, face


def compute_vertex_normals(mesh: TriangleMesh):
    """Angle-weighted average of incident face normals, normalized.

    Isolated vertices get a zero vector (flagged by their zero norm).
    """
    v, f = mesh.vertices, mesh.faces
    normals = np.zeros_like(v)
    fn = mesh.face_normals
    corners = [v[f[:, k]] for k in range(3)]
    for k in range(3):
        e1 = corners[(k + 1) % 3] - corners[k]
        e2 = corners[(k + 2) % 3] - corners[k]
        l1 = np.linalg.norm(e1, axis=1)
        l2 = np.linalg.norm(e2, axis=1)
        denom = np.maximum(l1 * l2, 1e-300)
        cosang = np.clip(np.einsum("ij,ij->i", e1, e2) / denom, -1.0, 1.0)
        ang = np.arccos(cosang)
        np.add.at(normals, f[:, k], fn * ang[:, None])
    lens = np.linalg.norm(normals, axis=1)
    ok = lens > 0
    normals[ok] /= lens[ok, None]
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} isolated vertices have zero normals")
    return normals


def read_obj(path) -> TriangleMesh:
    """Minimal OBJ reader: only `v x y z` and triangular `f i j k` lines."""
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v" and len(parts) >= 4:
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f" and len(parts) == 4:
                idx = [int(p.split("/")[0]) for p in parts[1:4]]
                faces.append([i - 1 for i in idx])
    if not verts:
        raise ValueError(f"no vertices in {path}")
    return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(mesh: TriangleMesh, path):
    with open(path, "w", encoding="utf-8") as fh:
        for p in mesh.vertices:
            fh.write(f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
