"""Ray/triangle-mesh intersection through a bounding-volume hierarchy."""

from __future__ import annotations

import numba
import numpy as np

LEAF_SIZE = 4
_EPS = 1e-12


@numba.njit(cache=True)
def _build(tri_min, tri_max, centroids, leaf_size):
    n = centroids.shape[0]
    max_nodes = 2 * n + 1
    node_min = np.empty((max_nodes, 3))
    node_max = np.empty((max_nodes, 3))
    # leaf: start >= 0 with count; inner: start = -1, left/right children
    node_start = np.full(max_nodes, -1, np.int64)
    node_count = np.zeros(max_nodes, np.int64)
    node_left = np.full(max_nodes, -1, np.int64)
    node_right = np.full(max_nodes, -1, np.int64)
    order = np.arange(n)

    stack_node = np.empty(max_nodes, np.int64)
    stack_lo = np.empty(max_nodes, np.int64)
    stack_hi = np.empty(max_nodes, np.int64)
    sp = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        for k in range(3):
            node_min[node, k] = np.inf
            node_max[node, k] = -np.inf
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for i in range(lo, hi):
            t = order[i]
            for k in range(3):
                node_min[node, k] = min(node_min[node, k], tri_min[t, k])
                node_max[node, k] = max(node_max[node, k], tri_max[t, k])
                cmin[k] = min(cmin[k], centroids[t, k])
                cmax[k] = max(cmax[k], centroids[t, k])
        if hi - lo <= leaf_size:
            node_start[node] = lo
            node_count[node] = hi - lo
            continue
        axis = 0
        ext = cmax - cmin
        if ext[1] > ext[axis]:
            axis = 1
        if ext[2] > ext[axis]:
            axis = 2
        seg = order[lo:hi].copy()
        keys = np.empty(hi - lo)
        for i in range(hi - lo):
            keys[i] = centroids[seg[i], axis]
        perm = np.argsort(keys, kind="mergesort")
        for i in range(hi - lo):
            order[lo + i] = seg[perm[i]]
        mid = (lo + hi) // 2
        left = n_nodes
        right = n_nodes + 1
        n_nodes += 2
        node_left[node] = left
        node_right[node] = right
        stack_node[sp] = right
        stack_lo[sp] = mid
        stack_hi[sp] = hi
        sp += 1
        stack_node[sp] = left
        stack_lo[sp] = lo
        stack_hi[sp] = mid
        sp += 1
    return (node_min[:n_nodes].copy(), node_max[:n_nodes].copy(), node_start[:n_nodes].copy(),
            node_count[:n_nodes].copy(), node_left[:n_nodes].copy(), node_right[:n_nodes].copy(), order)


@numba.njit(cache=True)
def _box_hit(bmin, bmax, o, inv, tmax):
    t0 = 0.0
    t1 = tmax
    for k in range(3):
        a = (bmin[k] - o[k]) * inv[k]
        b = (bmax[k] - o[k]) * inv[k]
        if a > b:
            a, b = b, a
        if a > t0:
            t0 = a
        if b < t1:
            t1 = b
        if t0 > t1:
            return False
    return True


@numba.njit(cache=True)
def _trace(origins, dirs, v0, e1, e2, node_min, node_max, node_start, node_count,
           node_left, node_right, order, t_out, idx_out):
    n_rays = origins.shape[0]
    stack = np.empty(128, np.int64)
    o = np.empty(3)
    d = np.empty(3)
    inv = np.empty(3)
    for r in range(n_rays):
        for k in range(3):
            o[k] = origins[r, k]
            d[k] = dirs[r, k]
            inv[k] = 1.0 / d[k] if d[k] != 0.0 else np.inf
        best = np.inf
        best_i = -1
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _box_hit(node_min[node], node_max[node], o, inv, best):
                continue
            if node_start[node] >= 0:
                for j in range(node_start[node], node_start[node] + node_count[node]):
                    t = order[j]
                    # Moller-Trumbore
                    px = d[1] * e2[t, 2] - d[2] * e2[t, 1]
                    py = d[2] * e2[t, 0] - d[0] * e2[t, 2]
                    pz = d[0] * e2[t, 1] - d[1] * e2[t, 0]
                    det = e1[t, 0] * px + e1[t, 1] * py + e1[t, 2] * pz
                    if abs(det) < _EPS:
                        continue
                    inv_det = 1.0 / det
                    sx = o[0] - v0[t, 0]
                    sy = o[1] - v0[t, 1]
                    sz = o[2] - v0[t, 2]
                    u = (sx * px + sy * py + sz * pz) * inv_det
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = sy * e1[t, 2] - sz * e1[t, 1]
                    qy = sz * e1[t, 0] - sx * e1[t, 2]
                    qz = sx * e1[t, 1] - sy * e1[t, 0]
                    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv_det
                    if v < 0.0 or u + v > 1.0:
                        continue
                    tt = (e2[t, 0] * qx + e2[t, 1] * qy + e2[t, 2] * qz) * inv_det
                    if tt > _EPS and tt < best:
                        best = tt
                        best_i = t
            else:
                if sp + 2 > stack.shape[0]:
                    raise RuntimeError("BVH traversal stack overflow")
                stack[sp] = node_right[node]
                sp += 1
                stack[sp] = node_left[node]
                sp += 1
        t_out[r] = best
        idx_out[r] = best_i


class MeshRaycaster:
    """Closest-hit queries against a fixed triangle mesh."""

    def __init__(self, vertices, triangles, leaf_size: int = LEAF_SIZE):
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        t = np.ascontiguousarray(triangles, dtype=np.int64)
        if len(t) == 0:
            raise ValueError("cannot raycast an empty mesh")
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        self.v0 = np.ascontiguousarray(a)
        self.e1 = np.ascontiguousarray(b - a)
        self.e2 = np.ascontiguousarray(c - a)
        n = np.cross(self.e1, self.e2)
        self.face_normals = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        tri_min = np.minimum(np.minimum(a, b), c)
        tri_max = np.maximum(np.maximum(a, b), c)
        self._bvh = _build(tri_min, tri_max, (a + b + c) / 3.0, leaf_size)

    def intersect(self, origins, directions):
        """Return (distance, triangle index); misses give (inf, -1).

        Distances are in units of ``directions``; pass unit directions for
        Euclidean ray length.
        """
        origins = np.ascontiguousarray(np.broadcast_to(origins, np.shape(directions)), dtype=np.float64)
        dirs = np.ascontiguousarray(directions, dtype=np.float64)
        shape = dirs.shape[:-1]
        o = origins.reshape(-1, 3)
        d = dirs.reshape(-1, 3)
        t = np.empty(len(d))
        idx = np.empty(len(d), np.int64)
        _trace(o, d, self.v0, self.e1, self.e2, *self._bvh, t, idx)
        return t.reshape(shape), idx.reshape(shape)
