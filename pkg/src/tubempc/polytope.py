"""Convex polytope algebra in halfspace representation for low dimensions.

A polytope is {x : A x <= b}.  All constraint tightening in the controllers
is done through the Minkowski sum / Pontryagin difference / support-function
operations defined here.  Sets are small (dimension <= 4, a few dozen rows),
so exactness is preferred over scalability: Minkowski sums go through vertex
enumeration and a convex hull, redundancy removal is one LP per row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection, QhullError

DEFAULT_TOL = 1e-9


class PolytopeError(ValueError):
    """Raised on dimension mismatches, unbounded inputs, or empty-set queries."""


def _linprog(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None):
    return linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                   bounds=(None, None), method="highs")


@dataclass(frozen=True)
class Polytope:
    """Halfspace polytope {x : normals @ x <= offsets}.

    Immutable after construction; all operations return new instances.
    """

    normals: np.ndarray
    offsets: np.ndarray
    dim: int = field(default=0)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.normals, dtype=float))
        b = np.asarray(self.offsets, dtype=float).ravel()
        if A.shape[0] != b.shape[0]:
            raise PolytopeError(f"{A.shape[0]} normals but {b.shape[0]} offsets")
        A = np.ascontiguousarray(A)
        b = np.ascontiguousarray(b)
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "normals", A)
        object.__setattr__(self, "offsets", b)
        object.__setattr__(self, "dim", A.shape[1])

    # -- construction -----------------------------------------------------

    @staticmethod
    def from_box(lower, upper) -> "Polytope":
        """Axis-aligned box [lower, upper] as 2n halfspaces."""
        lo = np.asarray(lower, dtype=float).ravel()
        hi = np.asarray(upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise PolytopeError("lower and upper must have the same length")
        if np.any(lo > hi):
            raise PolytopeError("lower exceeds upper in some coordinate")
        n = lo.size
        eye = np.eye(n)
        return Polytope(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))

    # -- basic queries -----------------------------------------------------

    def contains(self, x, tol: float = DEFAULT_TOL) -> bool:
        """Membership test with additive tolerance on every row."""
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.dim:
            raise PolytopeError("point dimension mismatch")
        return bool(np.all(self.normals @ x <= self.offsets + tol))

    def violation(self, x) -> float:
        """Largest signed constraint violation at x (<= 0 means inside)."""
        x = np.asarray(x, dtype=float).ravel()
        return float(np.max(self.normals @ x - self.offsets))

    def support(self, direction) -> float:
        """max_{x in P} direction . x, by LP.  Errors on empty/unbounded P."""
        d = np.asarray(direction, dtype=float).ravel()
        if d.size != self.dim:
            raise PolytopeError("direction dimension mismatch")
        res = _linprog(-d, A_ub=self.normals, b_ub=self.offsets)
        if res.status == 2:
            raise PolytopeError("support of an empty polytope")
        if res.status == 3:
            raise PolytopeError("polytope unbounded in the queried direction")
        if not res.success:
            raise PolytopeError(f"support LP failed: {res.message}")
        return float(-res.fun)

    def is_empty(self, tol: float = DEFAULT_TOL) -> bool:
        res = _linprog(np.zeros(self.dim), A_ub=self.normals,
                       b_ub=self.offsets + tol)
        return res.status == 2

    def is_bounded(self) -> bool:
        for i in range(self.dim):
            d = np.zeros(self.dim)
            for s in (1.0, -1.0):
                d[i] = s
                res = _linprog(-d, A_ub=self.normals, b_ub=self.offsets)
                if res.status == 3:
                    return False
        return True

    def chebyshev_center(self) -> tuple[np.ndarray, float]:
        """Center and radius of the largest inscribed ball."""
        norms = np.linalg.norm(self.normals, axis=1)
        c = np.zeros(self.dim + 1)
        c[-1] = -1.0
        A = np.hstack([self.normals, norms[:, None]])
        res = _linprog(c, A_ub=A, b_ub=self.offsets)
        if res.status == 2 or res.x is None:
            raise PolytopeError("chebyshev center of an empty polytope")
        return res.x[:-1], float(res.x[-1])

    # -- set relations -----------------------------------------------------

    def subset_of(self, other: "Polytope", tol: float = DEFAULT_TOL) -> bool:
        """True iff support(self, a) <= b + tol for every row (a, b) of other."""
        if other.dim != self.dim:
            raise PolytopeError("dimension mismatch")
        if self.is_empty():
            return True
        for a, b in zip(other.normals, other.offsets):
            if self.support(a) > b + tol:
                return False
        return True

    # -- reduction ---------------------------------------------------------

    def normalized(self) -> "Polytope":
        """Scale each row to unit normal; drop zero rows that are vacuous."""
        norms = np.linalg.norm(self.normals, axis=1)
        keep_A, keep_b = [], []
        for a, b, s in zip(self.normals, self.offsets, norms):
            if s < 1e-14:
                if b < -1e-12:      # 0 <= b fails: keep as infeasibility marker
                    return _EMPTY_MARKER(self.dim)
                continue
            keep_A.append(a / s)
            keep_b.append(b / s)
        if not keep_A:
            raise PolytopeError("no nontrivial halfspaces remain")
        return Polytope(np.array(keep_A), np.array(keep_b))

    def reduce(self, tol: float = DEFAULT_TOL) -> "Polytope":
        """Remove duplicate and redundant rows (one LP per surviving row)."""
        p = self.normalized()
        if p.is_empty():
            return p
        # drop near-duplicate rows, keeping the tightest offset
        rows: dict[tuple, float] = {}
        order: list[tuple] = []
        for a, b in zip(p.normals, p.offsets):
            key = tuple(np.round(a, 10))
            if key in rows:
                rows[key] = min(rows[key], b)
            else:
                rows[key] = b
                order.append(key)
        A = np.array([np.array(k) for k in order])
        b = np.array([rows[k] for k in order])
        if A.shape[0] <= 1:
            return Polytope(A, b)
        keep = np.ones(A.shape[0], dtype=bool)
        for i in range(A.shape[0]):
            rest = keep.copy()
            rest[i] = False
            if not rest.any():
                continue
            b_rel = b.copy()
            b_rel[i] += 1.0     # relax row i so the LP is bounded by the rest
            res = _linprog(-A[i], A_ub=A[rest | (np.arange(len(b)) == i)],
                           b_ub=b_rel[rest | (np.arange(len(b)) == i)])
            if res.status == 3:
                continue        # unbounded without row i: row is essential
            if res.success and -res.fun <= b[i] + tol:
                keep[i] = False
        return Polytope(A[keep], b[keep])

    # -- vertex enumeration (dim <= 3) --------------------------------------

    def vertices(self, tol: float = 1e-7) -> np.ndarray:
        """Vertices of a bounded polytope; supports degenerate sets for dim<=2."""
        if self.dim == 1:
            lo, hi = -self.support([-1.0]), self.support([1.0])
            if lo > hi + tol:
                raise PolytopeError("empty polytope has no vertices")
            return np.array([[lo], [hi]]) if hi - lo > tol else np.array([[lo]])
        if self.dim == 2:
            return self._vertices_2d(tol)
        if self.dim == 3:
            return self._vertices_nd()
        raise PolytopeError("vertex enumeration limited to dim <= 3")

    def _vertices_2d(self, tol: float) -> np.ndarray:
        p = self.normalized()
        A, b = p.normals, p.offsets
        m = A.shape[0]
        pts = []
        for i in range(m):
            for j in range(i + 1, m):
                M = np.array([A[i], A[j]])
                det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
                if abs(det) < 1e-12:
                    continue
                v = np.linalg.solve(M, np.array([b[i], b[j]]))
                if np.all(A @ v <= b + max(tol, 1e-7 * max(1.0, abs(v).max()))):
                    pts.append(v)
        if not pts:
            raise PolytopeError("no vertices found (empty or unbounded)")
        pts = _dedupe_points(np.array(pts), tol)
        # counterclockwise order about the centroid
        c = pts.mean(axis=0)
        ang = np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0])
        return pts[np.argsort(ang, kind="stable")]

    def _vertices_nd(self) -> np.ndarray:
        center, radius = self.chebyshev_center()
        if radius < 1e-9:
            raise PolytopeError("degenerate polytope: vertex enumeration "
                                "needs a full-dimensional set for dim 3")
        hs = np.hstack([self.normals, -self.offsets[:, None]])
        inter = HalfspaceIntersection(hs, center)
        return _dedupe_points(inter.intersections, 1e-7)

    def vertices_2d(self) -> np.ndarray:
        """Counterclockwise vertex list; dim must be 2."""
        if self.dim != 2:
            raise PolytopeError("vertices_2d requires dim == 2")
        return self._vertices_2d(1e-7)

    # -- set arithmetic ------------------------------------------------------

    def minkowski_sum(self, other: "Polytope") -> "Polytope":
        """Exact Minkowski sum via vertex enumeration + convex hull (dim<=3)."""
        if other.dim != self.dim:
            raise PolytopeError("dimension mismatch")
        if not (self.is_bounded() and other.is_bounded()):
            raise PolytopeError("minkowski_sum requires bounded operands")
        vq = other.vertices()
        if vq.shape[0] == 1:                       # singleton: pure translation
            return self.translate(vq[0]).reduce()
        vp = self.vertices()
        if vp.shape[0] == 1:
            return other.translate(vp[0]).reduce()
        pts = (vp[:, None, :] + vq[None, :, :]).reshape(-1, self.dim)
        return hull_of_points(pts).reduce()

    def pontryagin_diff(self, other: "Polytope") -> "Polytope":
        """{x : x + other subset of self}: offsets shrink by support values."""
        if other.dim != self.dim:
            raise PolytopeError("dimension mismatch")
        if not other.is_bounded():
            raise PolytopeError("pontryagin_diff requires a bounded subtrahend")
        new_b = np.array([b - other.support(a)
                          for a, b in zip(self.normals, self.offsets)])
        out = Polytope(self.normals, new_b)
        return out if out.is_empty() else out.reduce()

    def translate(self, v) -> "Polytope":
        v = np.asarray(v, dtype=float).ravel()
        return Polytope(self.normals, self.offsets + self.normals @ v)

    def affine_map(self, M) -> "Polytope":
        """Exact image {M x : x in P}; handles rank-deficient maps."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.shape[1] != self.dim:
            raise PolytopeError("map column count must equal polytope dim")
        pts = self.vertices() @ M.T
        return hull_of_points(pts).reduce()

    def scale(self, factor: float) -> "Polytope":
        """Homothety about the origin (requires 0 in P for set semantics)."""
        if factor <= 0:
            raise PolytopeError("scale factor must be positive")
        return Polytope(self.normals, self.offsets * factor)

    def intersect(self, other: "Polytope") -> "Polytope":
        if other.dim != self.dim:
            raise PolytopeError("dimension mismatch")
        out = Polytope(np.vstack([self.normals, other.normals]),
                       np.concatenate([self.offsets, other.offsets]))
        return out if out.is_empty() else out.reduce()

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {"A": self.normals.tolist(), "b": self.offsets.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "Polytope":
        return Polytope(np.array(d["A"], dtype=float),
                        np.array(d["b"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @staticmethod
    def from_json(s: str) -> "Polytope":
        return Polytope.from_dict(json.loads(s))

    def __repr__(self):
        return f"Polytope(dim={self.dim}, rows={self.normals.shape[0]})"


@dataclass(frozen=True)
class Box:
    """Interval box; lossless convenience form of an axis-aligned Polytope."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise PolytopeError("lower and upper must have the same length")
        if np.any(lo > hi):
            raise PolytopeError("lower exceeds upper in some coordinate")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def to_polytope(self) -> Polytope:
        return Polytope.from_box(self.lower, self.upper)


def _EMPTY_MARKER(dim: int) -> Polytope:
    A = np.zeros((2, dim))
    A[0, 0], A[1, 0] = 1.0, -1.0
    return Polytope(A, np.array([-1.0, -1.0]))   # x0 <= -1 and -x0 <= -1


def _dedupe_points(pts: np.ndarray, tol: float) -> np.ndarray:
    scale = max(1.0, np.abs(pts).max())
    out = []
    for p in pts:
        if not any(np.linalg.norm(p - q) <= tol * scale for q in out):
            out.append(p)
    return np.array(out)


def hull_of_points(pts: np.ndarray) -> Polytope:
    """H-representation of the convex hull of a point cloud (dim <= 3).

    Degenerate clouds (single point, collinear points in 2-D) get explicit
    equality-pair halfspaces instead of a Qhull call.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    dim = pts.shape[1]
    pts = _dedupe_points(pts, 1e-12)
    if pts.shape[0] == 1:
        v = pts[0]
        eye = np.eye(dim)
        return Polytope(np.vstack([eye, -eye]), np.concatenate([v, -v]))
    if dim == 1:
        return Polytope(np.array([[1.0], [-1.0]]),
                        np.array([pts.max(), -pts.min()]))
    centered = pts - pts.mean(axis=0)
    rank = np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, abs(pts).max()))
    if dim == 2 and rank == 1:
        # segment: slab about the carrier line plus end caps
        d = centered[np.argmax(np.linalg.norm(centered, axis=1))]
        d = d / np.linalg.norm(d)
        n = np.array([-d[1], d[0]])
        c = float(n @ pts[0])
        t = pts @ d
        return Polytope(np.array([n, -n, d, -d]),
                        np.array([c, -c, t.max(), -t.min()]))
    if rank < dim:
        raise PolytopeError("degenerate hull not supported in dim 3")
    try:
        hull = ConvexHull(pts)
    except QhullError as e:
        raise PolytopeError(f"convex hull failed: {e}") from e
    # hull.equations rows are [normal, offset] with normal @ x + offset <= 0
    return Polytope(hull.equations[:, :-1], -hull.equations[:, -1])


# Module-level functional aliases mirroring the operation names.

def from_box(lower, upper) -> Polytope:
    return Polytope.from_box(lower, upper)


def minkowski_sum(p: Polytope, q: Polytope) -> Polytope:
    return p.minkowski_sum(q)


def pontryagin_diff(p: Polytope, q: Polytope) -> Polytope:
    return p.pontryagin_diff(q)


def affine_map(p: Polytope, M) -> Polytope:
    return p.affine_map(M)


def contains(p: Polytope, x, tol: float = DEFAULT_TOL) -> bool:
    return p.contains(x, tol)


def support(p: Polytope, direction) -> float:
    return p.support(direction)


def subset_of(p: Polytope, q: Polytope, tol: float = DEFAULT_TOL) -> bool:
    return p.subset_of(q, tol)


def intersect(p: Polytope, q: Polytope) -> Polytope:
    return p.intersect(q)


def is_empty(p: Polytope) -> bool:
    return p.is_empty()


def vertices_2d(p: Polytope) -> np.ndarray:
    return p.vertices_2d()
