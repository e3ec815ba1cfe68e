"""Core geometric types: anchors, arcs, poly-continua, connectivity.

Everything in this module is immutable after construction and purely
functional, so instances can be shared freely between threads.

Conventions
-----------
* The ambient domain is the closed upper half-plane; points are complex.
* Arcs are adaptive polylines.  Two arcs belong to the same component of a
  poly-continuum when any pair of their samples is closer than the gluing
  tolerance ``GLUE_TOL`` (this is also the convention for arcs that cross
  transversally in their interiors).
* A sample with imaginary part below ``GLUE_TOL`` counts as touching the
  real axis.  Components are components of the arc union itself: two
  disjoint grounded components stay distinct even though both meet the
  real axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import AnchorNotOnContinuum, EmptyContinuum

GLUE_TOL = 1e-9          # endpoint/crossing gluing tolerance (absolute)
ANCHOR_MATCH_TOL = 1e-7  # anchor-to-arc nearest-point tolerance (absolute)


@dataclass(frozen=True)
class AnchorSet:
    """Finite set of anchor points in the open upper half-plane."""

    points: tuple

    def __init__(self, points):
        pts = tuple(complex(p) for p in points)
        if len(pts) < 1:
            raise ValueError("anchor set must contain at least one point")
        for p in pts:
            if p.imag <= 0:
                raise ValueError(f"anchor {p} not in the open upper half-plane")
        arr = np.asarray(pts)
        if len(pts) > 1:
            d = np.abs(arr[:, None] - arr[None, :])
            np.fill_diagonal(d, np.inf)
            if d.min() == 0.0:
                raise ValueError("anchor points must be pairwise distinct")
        object.__setattr__(self, "points", pts)

    @property
    def N(self) -> int:
        return len(self.points)

    @cached_property
    def diameter(self) -> float:
        """Diameter of the anchor set united with its complex conjugate."""
        arr = np.asarray(self.points)
        both = np.concatenate([arr, arr.conj()])
        return float(np.abs(both[:, None] - both[None, :]).max())

    def translated(self, a: float) -> "AnchorSet":
        return AnchorSet([p + a for p in self.points])

    def scaled(self, lam: float) -> "AnchorSet":
        if lam <= 0:
            raise ValueError("scale factor must be positive")
        return AnchorSet([lam * p for p in self.points])


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest of the segments [a_k, b_k]."""
    ab = b - a
    denom = np.abs(ab) ** 2
    denom = np.where(denom == 0.0, 1.0, denom)
    t = ((points[:, None] - a[None, :]) * ab[None, :].conj()).real / denom[None, :]
    t = np.clip(t, 0.0, 1.0)
    proj = a[None, :] + t * ab[None, :]
    return np.abs(points[:, None] - proj).min(axis=1)


@dataclass(frozen=True)
class Arc:
    """Polyline approximation of a piecewise-smooth arc in the closed
    upper half-plane.

    Single-sample arcs are tolerated as degenerate point components; they are
    convenient for perturbation experiments even though they carry no length.
    """

    samples: np.ndarray
    closed: bool = False

    def __init__(self, samples, closed: bool = False, validate: bool = True):
        z = np.asarray(samples, dtype=complex)
        if z.ndim != 1 or len(z) < 1:
            raise ValueError("an arc needs at least one sample")
        if validate:
            if np.any(z.imag < -GLUE_TOL):
                raise ValueError("arc samples must stay in the closed upper half-plane")
            if len(z) > 1 and np.any(np.abs(np.diff(z)) == 0.0):
                raise ValueError("consecutive arc samples must be distinct")
        z = np.where(np.abs(z.imag) < GLUE_TOL, z.real + 0.0j, z)
        z.setflags(write=False)
        object.__setattr__(self, "samples", z)
        object.__setattr__(self, "closed", bool(closed))

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def cumlen(self) -> np.ndarray:
        if len(self.samples) == 1:
            return np.zeros(1)
        return np.concatenate([[0.0], np.cumsum(np.abs(np.diff(self.samples)))])

    @property
    def length(self) -> float:
        return float(self.cumlen[-1])

    def point_at(self, s):
        """Point(s) at arclength parameter ``s`` (linear interpolation)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        x = np.interp(s, self.cumlen, self.samples.real)
        y = np.interp(s, self.cumlen, self.samples.imag)
        out = x + 1j * y
        return out if out.size > 1 else complex(out[0])

    def smooth_point(self, s):
        """Point(s) at arclength ``s`` via a cached cubic-spline fit; much
        more accurate than ``point_at`` on densely traced curved arcs."""
        sp = getattr(self, "_spline", None)
        if sp is None:
            if len(self.samples) < 4:
                sp = False
            else:
                from scipy.interpolate import CubicSpline
                t = self.cumlen
                keep = np.concatenate([[True], np.diff(t) > 0])
                sp = (CubicSpline(t[keep], self.samples.real[keep]),
                      CubicSpline(t[keep], self.samples.imag[keep]))
            object.__setattr__(self, "_spline", sp)
        if sp is False:
            return self.point_at(s)
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = sp[0](s) + 1j * sp[1](s)
        return out if out.size > 1 else complex(out[0])

    def smooth_speed(self, s):
        """|dz/ds| of the spline fit (the stored parameter is chord-based,
        so this is slightly above 1 on curved arcs)."""
        self.smooth_point(self.cumlen[0])  # ensure spline cache
        sp = getattr(self, "_spline", None)
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if sp is False or sp is None:
            return np.ones_like(s)
        return np.abs(sp[0](s, 1) + 1j * sp[1](s, 1))

    def resampled(self, h: float) -> np.ndarray:
        """Samples at spacing at most ``h`` (returns the raw point array)."""
        if len(self.samples) == 1 or self.length == 0.0:
            return self.samples.copy()
        n = max(2, int(np.ceil(self.length / h)) + 1)
        s = np.linspace(0.0, self.length, n)
        x = np.interp(s, self.cumlen, self.samples.real)
        y = np.interp(s, self.cumlen, self.samples.imag)
        return x + 1j * y

    def distance_to(self, points) -> np.ndarray:
        """Distance from external points to this arc (exact on segments)."""
        pts = np.atleast_1d(np.asarray(points, dtype=complex))
        if len(self.samples) == 1:
            return np.abs(pts - self.samples[0])
        return _segment_distances(pts, self.samples[:-1], self.samples[1:])

    def touches_real_axis(self) -> bool:
        return bool(np.any(self.samples.imag < GLUE_TOL))

    def self_intersects(self, tol: float = GLUE_TOL) -> bool:
        """Transversal self-intersection test on the (subsampled) polyline."""
        z = self.samples
        if len(z) > 256:
            idx = np.unique(np.linspace(0, len(z) - 1, 256).astype(int))
            z = z[idx]
        if len(z) < 4:
            return False
        a, b = z[:-1], z[1:]
        n = len(a)
        for i in range(n - 2):
            js = np.arange(i + 2, n)
            d = _seg_seg_distance(a[i], b[i], a[js], b[js])
            if np.any(d < tol):
                return True
        return False


def _seg_seg_distance(p0, p1, q0, q1):
    """Distance between segment [p0,p1] and each segment [q0_k, q1_k]."""
    samples = np.linspace(0.0, 1.0, 9)
    p = p0 + samples * (p1 - p0)
    d1 = _segment_distances(p, np.atleast_1d(q0), np.atleast_1d(q1)).reshape(len(p), -1).min(axis=0)
    q_all = (np.atleast_1d(q0)[:, None] + samples[None, :] * (np.atleast_1d(q1) - np.atleast_1d(q0))[:, None])
    d2 = np.array([_segment_distances(row, np.atleast_1d(p0), np.atleast_1d(p1)).min() for row in q_all])
    return np.minimum(d1, d2)


class PolyContinuum:
    """Finite union of arcs with its partition into connected components.

    Components are indexed 0..k-1; ``grounded`` marks the ones whose arcs
    touch the real axis.  The paper-style labelling (a single K_0 meeting
    the axis) is recovered through :meth:`grounded_components` /
    :meth:`floating_components`; several grounded components may coexist,
    connected only through the axis itself.
    """

    def __init__(self, arcs, glue_tol: float = GLUE_TOL):
        arcs = [a if isinstance(a, Arc) else Arc(a) for a in arcs]
        if not arcs:
            raise EmptyContinuum("poly-continuum must contain at least one arc")
        self.arcs = tuple(arcs)
        self.glue_tol = glue_tol
        self._component_of = self._glue_components()

    def _glue_components(self):
        n = len(self.arcs)
        parent = list(range(n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        def union(i, j):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[rj] = ri

        pts = np.concatenate([a.samples for a in self.arcs])
        labels = np.concatenate([np.full(len(a.samples), i) for i, a in enumerate(self.arcs)])
        tree = cKDTree(np.column_stack([pts.real, pts.imag]))
        for i, j in tree.query_pairs(self.glue_tol):
            if labels[i] != labels[j]:
                union(labels[i], labels[j])
        roots = {}
        comp = []
        for i in range(n):
            r = find(i)
            if r not in roots:
                roots[r] = len(roots)
            comp.append(roots[r])
        return comp

    @property
    def n_components(self) -> int:
        return max(self._component_of) + 1

    def component_arcs(self, c: int):
        return [a for a, ci in zip(self.arcs, self._component_of) if ci == c]

    def component_grounded(self, c: int) -> bool:
        return any(a.touches_real_axis() for a in self.component_arcs(c))

    def grounded_components(self):
        return [c for c in range(self.n_components) if self.component_grounded(c)]

    def floating_components(self):
        return [c for c in range(self.n_components) if not self.component_grounded(c)]

    @property
    def n_floating(self) -> int:
        return len(self.floating_components())

    def component_of_point(self, z: complex, tol: float) -> int:
        """Component index hosting ``z``, or -1 if farther than ``tol``."""
        best, best_d = -1, np.inf
        for a, c in zip(self.arcs, self._component_of):
            d = float(a.distance_to(z)[0])
            if d < best_d:
                best, best_d = c, d
        return best if best_d <= tol else -1

    def all_samples(self) -> np.ndarray:
        return np.concatenate([a.samples for a in self.arcs])

    def smooth_point(self, s):
        """Point(s) at arclength ``s`` via a cached cubic-spline fit; much
        more accurate than ``point_at`` on densely traced curved arcs."""
        sp = getattr(self, "_spline", None)
        if sp is None:
            if len(self.samples) < 4:
                sp = False
            else:
                from scipy.interpolate import CubicSpline
                t = self.cumlen
                keep = np.concatenate([[True], np.diff(t) > 0])
                sp = (CubicSpline(t[keep], self.samples.real[keep]),
                      CubicSpline(t[keep], self.samples.imag[keep]))
            object.__setattr__(self, "_spline", sp)
        if sp is False:
            return self.point_at(s)
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = sp[0](s) + 1j * sp[1](s)
        return out if out.size > 1 else complex(out[0])

    def smooth_speed(self, s):
        """|dz/ds| of the spline fit (the stored parameter is chord-based,
        so this is slightly above 1 on curved arcs)."""
        self.smooth_point(self.cumlen[0])  # ensure spline cache
        sp = getattr(self, "_spline", None)
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if sp is False or sp is None:
            return np.ones_like(s)
        return np.abs(sp[0](s, 1) + 1j * sp[1](s, 1))

    def resampled(self, h: float) -> np.ndarray:
        return np.concatenate([a.resampled(h) for a in self.arcs])

    @property
    def diameter(self) -> float:
        pts = self.all_samples()
        return float(
            max(pts.real.max() - pts.real.min(), pts.imag.max() - pts.imag.min(), 1e-30)
        )

    def distance_to(self, points) -> np.ndarray:
        pts = np.atleast_1d(np.asarray(points, dtype=complex))
        d = np.full(pts.shape, np.inf)
        for a in self.arcs:
            d = np.minimum(d, a.distance_to(pts))
        return d

    def fast_distance(self, points, spacing: float | None = None) -> np.ndarray:
        """Approximate distance via a cached dense-sample tree.

        Accurate to half the resampling spacing (default 1e-3 x diameter);
        intended for banding/classification decisions on large point sets.
        """
        if spacing is None:
            spacing = 1e-3 * max(self.diameter, 1e-9)
        key = round(math.log10(spacing), 3)
        cache = getattr(self, "_dtree_cache", None)
        if cache is None:
            cache = {}
            setattr(self, "_dtree_cache", cache)
        if key not in cache:
            dense = self.resampled(spacing)
            cache[key] = cKDTree(np.column_stack([dense.real, dense.imag]))
        pts = np.atleast_1d(np.asarray(points, dtype=complex))
        return cache[key].query(np.column_stack([pts.real, pts.imag]))[0]

    def anchors_hosted(self, E: AnchorSet, tol: float = ANCHOR_MATCH_TOL):
        """Map anchor index -> component index; raises if an anchor is loose."""
        hosted = {}
        for j, e in enumerate(E.points):
            c = self.component_of_point(e, tol)
            if c < 0:
                raise AnchorNotOnContinuum(
                    f"anchor {e} farther than {tol} from every arc"
                )
            hosted[j] = c
        return hosted


class ConnectivityMatrix:
    """Symmetric (N+1) x (N+1) bit matrix; row/column 0 is the real axis."""

    def __init__(self, M):
        M = np.asarray(M, dtype=int)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("connectivity matrix must be square")
        if not np.array_equal(M, M.T):
            raise ValueError("connectivity matrix must be symmetric")
        if not np.isin(M, (0, 1)).all():
            raise ValueError("connectivity matrix entries must be bits")
        self.M = M
        self.M.setflags(write=False)

    @property
    def N(self) -> int:
        return self.M.shape[0] - 1

    def __getitem__(self, idx):
        return self.M[idx]

    def __eq__(self, other) -> bool:
        return isinstance(other, ConnectivityMatrix) and np.array_equal(self.M, other.M)

    def __ge__(self, other: "ConnectivityMatrix") -> bool:
        return bool(np.all(self.M >= other.M))

    def __repr__(self):
        return f"ConnectivityMatrix({self.M.tolist()})"

    @staticmethod
    def required(N: int, pairs=(), grounded=()):
        """Build a requirement matrix from anchor pairs (1-based) and a list
        of grounded anchors (1-based)."""
        M = np.zeros((N + 1, N + 1), dtype=int)
        np.fill_diagonal(M, 1)
        M[0, 0] = 1
        for i, j in pairs:
            M[i, j] = M[j, i] = 1
        for i in grounded:
            M[0, i] = M[i, 0] = 1
        return ConnectivityMatrix(M)

    def transitive_closure(self) -> "ConnectivityMatrix":
        """Closure in the anchor block (indices >= 1)."""
        M = self.M.copy()
        n = M.shape[0]
        for l in range(1, n):
            for i in range(1, n):
                for j in range(1, n):
                    if M[i, l] and M[l, j]:
                        M[i, j] = 1
        return ConnectivityMatrix(M)


def connectivity_of(K: PolyContinuum, E: AnchorSet,
                    tol: float = ANCHOR_MATCH_TOL) -> ConnectivityMatrix:
    """Connectivity matrix of ``K`` with respect to the anchor set."""
    hosted = K.anchors_hosted(E, tol)
    N = E.N
    M = np.zeros((N + 1, N + 1), dtype=int)
    np.fill_diagonal(M, 1)
    M[0, 0] = 1
    for i in range(N):
        ci = hosted[i]
        if K.component_grounded(ci):
            M[0, i + 1] = M[i + 1, 0] = 1
        for j in range(i + 1, N):
            if hosted[j] == ci:
                M[i + 1, j + 1] = M[j + 1, i + 1] = 1
    return ConnectivityMatrix(M)


def class_membership(K: PolyContinuum, E: AnchorSet, M: ConnectivityMatrix,
                     tol: float = ANCHOR_MATCH_TOL) -> bool:
    """True iff the connectivity of ``K`` dominates ``M`` entrywise."""
    return connectivity_of(K, E, tol) >= M


def hausdorff_distance(K1: PolyContinuum, K2: PolyContinuum,
                       h: float | None = None) -> float:
    """Hausdorff distance between two poly-continua.

    Both sets are densely resampled at spacing at most ``h`` and the
    max-min distance is taken over the samples; the result is exact up to
    ``h/2``.  The default spacing is 1e-3 of the larger diameter.
    """
    if not K1.arcs or not K2.arcs:
        raise EmptyContinuum("hausdorff_distance requires non-empty continua")
    if h is None:
        h = 1e-3 * max(K1.diameter, K2.diameter, 1e-6)
    a = K1.resampled(h)
    b = K2.resampled(h)
    ta = cKDTree(np.column_stack([a.real, a.imag]))
    tb = cKDTree(np.column_stack([b.real, b.imag]))
    d_ab = tb.query(np.column_stack([a.real, a.imag]))[0].max()
    d_ba = ta.query(np.column_stack([b.real, b.imag]))[0].max()
    return float(max(d_ab, d_ba))


def segment(a: complex, b: complex, n: int = 64) -> Arc:
    """Straight arc from ``a`` to ``b`` with ``n`` samples."""
    return Arc(np.linspace(complex(a), complex(b), n))
