"""Exact point-to-triangle distances, brute force and BVH-accelerated.

Both paths evaluate the same per-triangle kernel with component-wise
arithmetic, so the accelerated minimum is bitwise identical to brute force.
"""

import numpy as np

from .exceptions import EmptyMesh

LEAF_SIZE = 4


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _cross(a, b):
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def _segment_sq(p, a, b):
    ab = b - a
    ap = p - a
    den = _dot(ab, ab)
    safe = np.where(den > 0, den, 1.0)
    t = np.clip(np.where(den > 0, _dot(ap, ab) / safe, 0.0), 0.0, 1.0)
    d = ap - t[..., None] * ab
    return _dot(d, d)


def point_triangle_sq_distance(p, tri):
    """Squared distance from point ``p`` (3,) to triangles ``tri`` (T, 3, 3)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    n = _cross(b - a, c - a)
    nn = _dot(n, n)
    ap = p - a
    safe = np.where(nn > 0, nn, 1.0)
    # barycentric test on the plane projection
    s_ab = _dot(_cross(b - a, p - a), n)
    s_bc = _dot(_cross(c - b, p - b), n)
    s_ca = _dot(_cross(a - c, p - c), n)
    inside = (nn > 0) & (s_ab >= 0) & (s_bc >= 0) & (s_ca >= 0)
    plane = _dot(ap, n) ** 2 / safe
    edges = np.minimum(np.minimum(_segment_sq(p, a, b), _segment_sq(p, b, c)), _segment_sq(p, c, a))
    return np.where(inside, plane, edges)


def _triangles(vertices, faces):
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.shape[0] == 0:
        raise EmptyMesh("mesh has no faces")
    return vertices[faces]


def brute_force_distances(points, vertices, faces):
    tri = _triangles(vertices, faces)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(points.shape[0])
    for i, p in enumerate(points):
        out[i] = np.sqrt(point_triangle_sq_distance(p, tri).min())
    return out


class TriangleBVH:
    """Axis-aligned bounding-box tree over triangles with median splits."""

    def __init__(self, vertices, faces, leaf_size=LEAF_SIZE):
        self.tri = _triangles(vertices, faces)
        self.leaf_size = leaf_size
        self.lo, self.hi, self.left, self.right, self.start, self.count = [], [], [], [], [], []
        order = np.arange(self.tri.shape[0])
        centroids = self.tri.mean(axis=1)
        self.order = []
        self._build(order, centroids)
        self.order = np.array(self.order)
        self.tri_sorted = self.tri[self.order]
        self.lo = np.array(self.lo)
        self.hi = np.array(self.hi)

    def _build(self, idx, centroids):
        node = len(self.lo)
        tri = self.tri[idx]
        self.lo.append(tri.min(axis=(0, 1)))
        self.hi.append(tri.max(axis=(0, 1)))
        self.left.append(-1)
        self.right.append(-1)
        self.start.append(-1)
        self.count.append(0)
        if idx.size <= self.leaf_size:
            self.start[node] = len(self.order)
            self.count[node] = idx.size
            self.order.extend(idx.tolist())
            return node
        c = centroids[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = idx[np.argsort(c[:, axis], kind="stable")]
        mid = srt.size // 2
        self.left[node] = self._build(srt[:mid], centroids)
        self.right[node] = self._build(srt[mid:], centroids)
        return node

    def _box_sq(self, node, p):
        d = np.maximum(np.maximum(self.lo[node] - p, p - self.hi[node]), 0.0)
        return float(d @ d)

    def query(self, p):
        """Exact squared distance from ``p`` to the closest triangle."""
        p = np.asarray(p, dtype=np.float64)
        best = np.inf
        stack = [0]
        while stack:
            node = stack.pop()
            # slack so rounding in the box bound never prunes the true minimum
            if self._box_sq(node, p) > best * (1 + 1e-9):
                continue
            if self.left[node] < 0:
                s, n = self.start[node], self.count[node]
                d = point_triangle_sq_distance(p, self.tri_sorted[s : s + n]).min()
                if d < best:
                    best = d
                continue
            l, r = self.left[node], self.right[node]
            dl, dr = self._box_sq(l, p), self._box_sq(r, p)
            # visit the nearer child first
            if dl <= dr:
                stack += [r, l]
            else:
                stack += [l, r]
        return best


def accelerated_distances(points, vertices, faces):
    bvh = TriangleBVH(vertices, faces)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.sqrt(np.array([bvh.query(p) for p in points]))
