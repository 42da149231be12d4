"""Randomized incremental 3D convex hull.

Orientation signs come from a floating-point filter that falls back to exact
rational arithmetic whenever the float determinant is within its rounding
bound, so the combinatorial structure is always consistent. The volume is
accumulated exactly from the hull vertices and rounded once.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np

from confpose.errors import DegenerateHull

COPLANAR_TOL = 1e-12
# Shewchuk's static bound for orient3d, relative to the permanent
_ORIENT_BOUND = (7.0 + 56.0 * 2.0**-53) * 2.0**-53


def _orient_exact(a, b, c, d) -> int:
    a, b, c, d = ([Fraction(float(v)) for v in p] for p in (a, b, c, d))
    u = [b[i] - a[i] for i in range(3)]
    v = [c[i] - a[i] for i in range(3)]
    w = [d[i] - a[i] for i in range(3)]
    det = (
        u[0] * (v[1] * w[2] - v[2] * w[1])
        - u[1] * (v[0] * w[2] - v[2] * w[0])
        + u[2] * (v[0] * w[1] - v[1] * w[0])
    )
    return (det > 0) - (det < 0)


def orient(a, b, c, d) -> int:
    """Sign of det[b - a, c - a, d - a]; positive when d is on the side the normal (b-a)x(c-a) points to."""
    return int(orient_many(np.asarray([a]), np.asarray([b]), np.asarray([c]), np.asarray(d))[0])


def orient_many(A: np.ndarray, B: np.ndarray, C: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Vectorized exact orientation of ``d`` against triangles ``(A[i], B[i], C[i])``."""
    u, v, w = B - A, C - A, d - A
    m0 = v[:, 1] * w[:, 2] - v[:, 2] * w[:, 1]
    m1 = v[:, 0] * w[:, 2] - v[:, 2] * w[:, 0]
    m2 = v[:, 0] * w[:, 1] - v[:, 1] * w[:, 0]
    det = u[:, 0] * m0 - u[:, 1] * m1 + u[:, 2] * m2
    av, aw = np.abs(v), np.abs(w)
    perm = (
        np.abs(u[:, 0]) * (av[:, 1] * aw[:, 2] + av[:, 2] * aw[:, 1])
        + np.abs(u[:, 1]) * (av[:, 0] * aw[:, 2] + av[:, 2] * aw[:, 0])
        + np.abs(u[:, 2]) * (av[:, 0] * aw[:, 1] + av[:, 1] * aw[:, 0])
    )
    sign = np.sign(det).astype(np.int64)
    # the differences themselves are rounded too; 4x covers them comfortably
    unsure = np.abs(det) <= 4.0 * _ORIENT_BOUND * perm
    for i in np.flatnonzero(unsure):
        sign[i] = _orient_exact(A[i], B[i], C[i], d)
    return sign


class ConvexHull3:
    """Convex hull of a 3D point cloud as outward-oriented triangles.

    ``faces`` indexes into ``points``; every face ``(a, b, c)`` has all other
    points on its non-positive side.
    """

    def __init__(self, points, seed: int = 0):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DegenerateHull(f"expected an (n, 3) array, got shape {pts.shape}")
        if pts.shape[0] < 4:
            raise DegenerateHull(f"need at least 4 points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise DegenerateHull("points must be finite")
        self.points = pts
        self.faces = self._build(pts, np.random.default_rng(seed))

    @staticmethod
    def _initial(pts: np.ndarray) -> list[int]:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        scale = float(np.linalg.norm(hi - lo))
        if scale == 0.0:
            raise DegenerateHull("all points coincide")
        i0 = int(np.argmin(pts[:, 0]))
        d = np.linalg.norm(pts - pts[i0], axis=1)
        i1 = int(np.argmax(d))
        e = (pts[i1] - pts[i0]) / d[i1]
        rel = pts - pts[i0]
        perp = rel - np.outer(rel @ e, e)
        i2 = int(np.argmax(np.linalg.norm(perp, axis=1)))
        n = np.cross(pts[i1] - pts[i0], pts[i2] - pts[i0])
        h = rel @ n
        i3 = int(np.argmax(np.abs(h)))
        # volume of the spanning tetrahedron relative to the bounding box
        if not abs(h[i3]) > COPLANAR_TOL * scale**3:
            raise DegenerateHull("points are coplanar")
        return [i0, i1, i2, i3]

    def _build(self, pts: np.ndarray, rng: np.random.Generator) -> list[tuple[int, int, int]]:
        i0, i1, i2, i3 = self._initial(pts)
        if orient(pts[i0], pts[i1], pts[i2], pts[i3]) > 0:
            i1, i2 = i2, i1
        faces: dict[int, tuple[int, int, int]] = {}
        edge_face: dict[tuple[int, int], int] = {}
        next_id = 0

        def add(a, b, c):
            nonlocal next_id
            faces[next_id] = (a, b, c)
            edge_face[(a, b)] = edge_face[(b, c)] = edge_face[(c, a)] = next_id
            next_id += 1

        # i3 lies on the negative side of (i0, i1, i2); orient the others to match
        add(i0, i1, i2)
        add(i0, i3, i1)
        add(i1, i3, i2)
        add(i2, i3, i0)
        seed_set = {i0, i1, i2, i3}
        order = [i for i in rng.permutation(pts.shape[0]) if i not in seed_set]
        for p in order:
            ids = np.fromiter(faces.keys(), dtype=np.int64)
            tri = np.array([faces[i] for i in ids])
            sign = orient_many(pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]], pts[p])
            visible = set(ids[sign > 0].tolist())
            if not visible:
                continue
            horizon = []
            for f in visible:
                a, b, c = faces[f]
                for e in ((a, b), (b, c), (c, a)):
                    if edge_face.get((e[1], e[0])) not in visible:
                        horizon.append(e)
            for f in visible:
                a, b, c = faces.pop(f)
                for e in ((a, b), (b, c), (c, a)):
                    if edge_face.get(e) == f:
                        del edge_face[e]
            for a, b in horizon:
                add(a, b, int(p))
        return [faces[k] for k in sorted(faces)]

    @property
    def vertices(self) -> np.ndarray:
        return np.unique(np.asarray(self.faces).ravel())

    def volume(self) -> float:
        """Exact sum of tetrahedra from the vertex centroid, rounded once."""
        verts = self.vertices
        frac = {int(i): [Fraction(float(v)) for v in self.points[i]] for i in verts}
        n = len(verts)
        centroid = [sum(frac[int(i)][k] for i in verts) / n for k in range(3)]
        total = Fraction(0)
        for a, b, c in self.faces:
            u = [frac[a][k] - centroid[k] for k in range(3)]
            v = [frac[b][k] - centroid[k] for k in range(3)]
            w = [frac[c][k] - centroid[k] for k in range(3)]
            total += (
                u[0] * (v[1] * w[2] - v[2] * w[1])
                - u[1] * (v[0] * w[2] - v[2] * w[0])
                + u[2] * (v[0] * w[1] - v[1] * w[0])
            )
        # faces are oriented outward, so each term is non-positive in this convention
        return float(abs(total) / 6)

    def contains(self, x) -> bool:
        """Closed-set membership."""
        tri = np.asarray(self.faces)
        sign = orient_many(self.points[tri[:, 0]], self.points[tri[:, 1]], self.points[tri[:, 2]], np.asarray(x, float))
        return bool(np.all(sign <= 0))


def convex_hull_volume_3d(points) -> float:
    return ConvexHull3(points).volume()
