"""Low-level jitted kernels: BVH traversal, ray tests, rasterization, EDT.

Everything here operates on flat numpy arrays so numba can compile it; the
friendly wrappers live in :mod:`sdfrecon.geometry` and
:mod:`sdfrecon.features`. All kernels are serial and deterministic.
"""

import numpy as np
from numba import njit

# Traversal stack depth; generous for any BVH of a few hundred thousand faces.
_STACK = 128


@njit(cache=True)
def closest_point_triangle(p, a, b, c):
    """Closest point on triangle abc to p. Returns (point, u, v, w)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab[0] * ap[0] + ab[1] * ap[1] + ab[2] * ap[2]
    d2 = ac[0] * ap[0] + ac[1] * ap[1] + ac[2] * ap[2]
    if d1 <= 0.0 and d2 <= 0.0:
        return a.copy(), 1.0, 0.0, 0.0

    bp = p - b
    d3 = ab[0] * bp[0] + ab[1] * bp[1] + ab[2] * bp[2]
    d4 = ac[0] * bp[0] + ac[1] * bp[1] + ac[2] * bp[2]
    if d3 >= 0.0 and d4 <= d3:
        return b.copy(), 0.0, 1.0, 0.0

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3) if d1 != d3 else 0.0
        return a + t * ab, 1.0 - t, t, 0.0

    cp = p - c
    d5 = ab[0] * cp[0] + ab[1] * cp[1] + ab[2] * cp[2]
    d6 = ac[0] * cp[0] + ac[1] * cp[1] + ac[2] * cp[2]
    if d6 >= 0.0 and d5 <= d6:
        return c.copy(), 0.0, 0.0, 1.0

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6) if d2 != d6 else 0.0
        return a + t * ac, 1.0 - t, 0.0, t

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        denom = (d4 - d3) + (d5 - d6)
        t = (d4 - d3) / denom if denom != 0.0 else 0.0
        return b + t * (c - b), 0.0, 1.0 - t, t

    denom = va + vb + vc
    if denom == 0.0:
        return a.copy(), 1.0, 0.0, 0.0
    v = vb / denom
    w = vc / denom
    return a + v * ab + w * ac, 1.0 - v - w, v, w


@njit(cache=True)
def _box_dist_sq(p, bmin, bmax):
    d = 0.0
    for k in range(3):
        if p[k] < bmin[k]:
            e = bmin[k] - p[k]
            d += e * e
        elif p[k] > bmax[k]:
            e = p[k] - bmax[k]
            d += e * e
    return d


@njit(cache=True)
def bvh_closest_points(
    node_min, node_max, node_left, node_right, node_start, node_count,
    prim_order, va, vb, vc, points,
    out_dist_sq, out_face, out_point, out_u, out_v, out_w,
):
    """Nearest surface point on the mesh for each query point.

    Nodes are laid out in flat arrays: internal nodes carry child indices in
    ``node_left``/``node_right`` (leaf marker: left == -1), leaves reference a
    contiguous slice ``node_start:node_start+node_count`` of ``prim_order``.
    Ties between equally distant faces resolve to the lowest face index so
    results are independent of tree shape.
    """
    stack = np.empty(_STACK, dtype=np.int32)
    for qi in range(points.shape[0]):
        p = points[qi]
        best = np.inf
        best_face = -1
        best_u = 1.0
        best_v = 0.0
        best_w = 0.0
        best_pt = p.copy()
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            ni = stack[top]
            if _box_dist_sq(p, node_min[ni], node_max[ni]) > best:
                continue
            if node_left[ni] < 0:
                s = node_start[ni]
                for j in range(node_count[ni]):
                    f = prim_order[s + j]
                    cp, u, v, w = closest_point_triangle(p, va[f], vb[f], vc[f])
                    dx = p[0] - cp[0]
                    dy = p[1] - cp[1]
                    dz = p[2] - cp[2]
                    d = dx * dx + dy * dy + dz * dz
                    if d < best or (d == best and f < best_face):
                        best = d
                        best_face = f
                        best_pt = cp
                        best_u = u
                        best_v = v
                        best_w = w
            else:
                l = node_left[ni]
                r = node_right[ni]
                dl = _box_dist_sq(p, node_min[l], node_max[l])
                dr = _box_dist_sq(p, node_min[r], node_max[r])
                # Push the farther child first so the nearer is visited next.
                if dl <= dr:
                    if dr <= best:
                        stack[top] = r
                        top += 1
                    if dl <= best:
                        stack[top] = l
                        top += 1
                else:
                    if dl <= best:
                        stack[top] = l
                        top += 1
                    if dr <= best:
                        stack[top] = r
                        top += 1
        out_dist_sq[qi] = best
        out_face[qi] = best_face
        out_point[qi, 0] = best_pt[0]
        out_point[qi, 1] = best_pt[1]
        out_point[qi, 2] = best_pt[2]
        out_u[qi] = best_u
        out_v[qi] = best_v
        out_w[qi] = best_w


@njit(cache=True)
def ray_triangle(orig, d, a, b, c):
    """Moller-Trumbore with inclusive boundaries.

    Returns (t, u, v, marginal). t < 0 means miss. ``marginal`` is 1 when the
    hit grazes an edge/vertex or the ray is near-parallel, in which case
    parity counting should retry with another direction.
    """
    e1 = b - a
    e2 = c - a
    px = d[1] * e2[2] - d[2] * e2[1]
    py = d[2] * e2[0] - d[0] * e2[2]
    pz = d[0] * e2[1] - d[1] * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    scale = (abs(e1[0]) + abs(e1[1]) + abs(e1[2])) * (abs(e2[0]) + abs(e2[1]) + abs(e2[2]))
    if abs(det) <= 1e-14 * scale:
        # Ray parallel to the triangle plane: only ambiguous when the origin
        # lies (nearly) in that plane.
        nx = e1[1] * e2[2] - e1[2] * e2[1]
        ny = e1[2] * e2[0] - e1[0] * e2[2]
        nz = e1[0] * e2[1] - e1[1] * e2[0]
        nn = np.sqrt(nx * nx + ny * ny + nz * nz)
        if nn == 0.0:
            return -1.0, 0.0, 0.0, 0
        off = ((orig[0] - a[0]) * nx + (orig[1] - a[1]) * ny + (orig[2] - a[2]) * nz) / nn
        grazing = 1 if abs(off) < 1e-9 * (1.0 + nn) else 0
        return -1.0, 0.0, 0.0, grazing
    inv = 1.0 / det
    tx = orig[0] - a[0]
    ty = orig[1] - a[1]
    tz = orig[2] - a[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0, u, 0.0, 0
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0, u, v, 0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    marginal = 0
    eps = 1e-9
    if u < eps or v < eps or u + v > 1.0 - eps:
        marginal = 1
    return t, u, v, marginal


@njit(cache=True)
def _box_ray_hits(orig, inv_d, bmin, bmax, t_best):
    tmin = 0.0
    tmax = t_best
    for k in range(3):
        t1 = (bmin[k] - orig[k]) * inv_d[k]
        t2 = (bmax[k] - orig[k]) * inv_d[k]
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tmin:
            tmin = t1
        if t2 < tmax:
            tmax = t2
        if tmin > tmax:
            return False
    return True


@njit(cache=True)
def bvh_ray_nearest(
    node_min, node_max, node_left, node_right, node_start, node_count,
    prim_order, va, vb, vc, orig, direction,
):
    """First intersection (t >= 0) of one ray. Returns (t, face); face -1 on miss.

    Equal-t hits (shared edges) resolve to the lowest face index.
    """
    inv_d = np.empty(3)
    for k in range(3):
        if direction[k] != 0.0:
            inv_d[k] = 1.0 / direction[k]
        else:
            inv_d[k] = np.inf
    best_t = np.inf
    best_face = -1
    stack = np.empty(_STACK, dtype=np.int32)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        ni = stack[top]
        if not _box_ray_hits(orig, inv_d, node_min[ni], node_max[ni], best_t):
            continue
        if node_left[ni] < 0:
            s = node_start[ni]
            for j in range(node_count[ni]):
                f = prim_order[s + j]
                t, u, v, _m = ray_triangle(orig, direction, va[f], vb[f], vc[f])
                if t >= 0.0 and (t < best_t or (t == best_t and f < best_face)):
                    best_t = t
                    best_face = f
        else:
            stack[top] = node_left[ni]
            top += 1
            stack[top] = node_right[ni]
            top += 1
    return best_t, best_face


@njit(cache=True)
def bvh_ray_crossings(
    node_min, node_max, node_left, node_right, node_start, node_count,
    prim_order, va, vb, vc, orig, direction,
):
    """Count ray/surface crossings for parity inside tests.

    Returns (count, marginal): a nonzero marginal flag means some hit grazed
    an edge or vertex and the caller should recount along another direction.
    """
    inv_d = np.empty(3)
    for k in range(3):
        if direction[k] != 0.0:
            inv_d[k] = 1.0 / direction[k]
        else:
            inv_d[k] = np.inf
    count = 0
    marginal = 0
    stack = np.empty(_STACK, dtype=np.int32)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        ni = stack[top]
        if not _box_ray_hits(orig, inv_d, node_min[ni], node_max[ni], np.inf):
            continue
        if node_left[ni] < 0:
            s = node_start[ni]
            for j in range(node_count[ni]):
                f = prim_order[s + j]
                t, u, v, m = ray_triangle(orig, direction, va[f], vb[f], vc[f])
                if t > 1e-12:
                    count += 1
                    if m != 0:
                        marginal = 1
                elif t >= 0.0 and m != 0:
                    marginal = 1
        else:
            stack[top] = node_left[ni]
            top += 1
            stack[top] = node_right[ni]
            top += 1
    return count, marginal


@njit(cache=True)
def bvh_ray_nearest_batch(
    node_min, node_max, node_left, node_right, node_start, node_count,
    prim_order, va, vb, vc, origins, directions, out_t, out_face,
):
    for i in range(origins.shape[0]):
        t, f = bvh_ray_nearest(
            node_min, node_max, node_left, node_right, node_start, node_count,
            prim_order, va, vb, vc, origins[i], directions[i],
        )
        out_t[i] = t
        out_face[i] = f


@njit(cache=True)
def rasterize_faces(pts2d, camz, faces, width, height, zbuf, fid, bary_u, bary_v):
    """Orthographic z-buffer rasterizer.

    ``pts2d`` holds projected pixel coordinates per vertex, ``camz`` the
    camera-space depth (smaller = closer to the image). Pixel (row j, col i)
    is sampled at its center (i + 0.5, j + 0.5). Inclusive edge tests; depth
    ties keep the lower face index, so output is independent of face order.
    """
    for f in range(faces.shape[0]):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        x0 = pts2d[i0, 0]
        y0 = pts2d[i0, 1]
        x1 = pts2d[i1, 0]
        y1 = pts2d[i1, 1]
        x2 = pts2d[i2, 0]
        y2 = pts2d[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        xmin = min(x0, min(x1, x2))
        xmax = max(x0, max(x1, x2))
        ymin = min(y0, min(y1, y2))
        ymax = max(y0, max(y1, y2))
        cx0 = int(max(0.0, np.floor(xmin - 0.5)))
        cx1 = int(min(width - 1.0, np.ceil(xmax - 0.5)))
        cy0 = int(max(0.0, np.floor(ymin - 0.5)))
        cy1 = int(min(height - 1.0, np.ceil(ymax - 0.5)))
        if cx1 < cx0 or cy1 < cy0:
            continue
        z0 = camz[i0]
        z1 = camz[i1]
        z2 = camz[i2]
        inv_area = 1.0 / area
        for j in range(cy0, cy1 + 1):
            py = j + 0.5
            for i in range(cx0, cx1 + 1):
                px = i + 0.5
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) * inv_area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = w0 * z0 + w1 * z1 + w2 * z2
                if z < zbuf[j, i] or (z == zbuf[j, i] and f < fid[j, i]):
                    zbuf[j, i] = z
                    fid[j, i] = f
                    bary_u[j, i] = w0
                    bary_v[j, i] = w1


@njit(cache=True)
def edt_1d(f, n, out, v, z):
    """Felzenszwalb-Huttenlocher 1D squared distance transform."""
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        while True:
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        dq = q - v[k]
        out[q] = dq * dq + f[v[k]]


@njit(cache=True)
def edt_2d(binary, out):
    """Exact Euclidean distance (pixels) to the nearest nonzero entry.

    Two passes of the 1D transform: columns then rows. Cells on the mask get
    distance 0; an all-zero mask yields +inf everywhere. Infinity is carried
    as a large finite sentinel through the parabola envelope (the true inf
    would produce inf-inf), then restored at the end.
    """
    big = 1e18
    h, w = binary.shape
    n = max(h, w)
    f = np.empty(n)
    g = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    for i in range(w):
        for j in range(h):
            f[j] = 0.0 if binary[j, i] != 0 else big
        edt_1d(f, h, g, v, z)
        for j in range(h):
            out[j, i] = g[j]
    for j in range(h):
        for i in range(w):
            f[i] = out[j, i]
        edt_1d(f, w, g, v, z)
        for i in range(w):
            d = np.sqrt(g[i])
            out[j, i] = d if d < 1e8 else np.inf
