"""Quasimomentum-type quadratic differentials and the real-period solve.

A differential here is the rational function

    Q(z) = P(z) / prod_j (z - e_j)(z - conj(e_j)),

with P monic of degree 2N, real coefficients, and the subleading coefficient
pinned to -2 sum Re(e_j) so that sqrt(Q) dz is residue-free at infinity.  The
solver adjusts the remaining coefficients until every cycle of sqrt(Q) dz on
the hyperelliptic cover has a purely real period.

Cycles are rounded rectangles around the vertical segment joining each
conjugate pair of branch points; adjacent odd-order real roots (a double root
split by the iteration) get a loop around their real segment, whose vanishing
imaginary period forces the pair to merge back.  By Schwarz symmetry all these
periods are automatically purely imaginary, so the residual vector is just
their imaginary parts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import pathint
from .errors import (BranchJump, DegenerateSurface, NewtonDivergence,
                     PoleEvaluation, QuadratureFailure)
from .geom import AnchorSet

POLE_COLLISION_TOL = 1e-5   # x diameter: numerator root counts as cancelling a pole
ROOT_CLUSTER_TOL = 1e-6     # x diameter: roots closer than this form one cluster
ROOT_PAIR_MERGE_TOL = 1e-3  # x diameter: near-double clusters treated as merged
REAL_ROOT_TOL = 1e-7        # x diameter: |Im| below this counts as a real root


@dataclass(frozen=True)
class QuadraticDifferential:
    """Monic real numerator over the fixed denominator of an anchor set."""

    anchors: AnchorSet
    coeffs: np.ndarray  # (c_1, ..., c_2N), real

    def __init__(self, anchors: AnchorSet, coeffs):
        c = np.asarray(coeffs, dtype=float)
        if c.shape != (2 * anchors.N,):
            raise ValueError(f"expected {2 * anchors.N} real coefficients, got {c.shape}")
        c1_required = -2.0 * sum(e.real for e in anchors.points)
        if abs(c[0] - c1_required) > 1e-9 * (1.0 + abs(c1_required)):
            raise ValueError(
                f"c_1={c[0]} violates the residue-free constraint (needs {c1_required})")
        c.setflags(write=False)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "coeffs", c)

    @property
    def N(self) -> int:
        return self.anchors.N

    @property
    def numerator(self) -> np.ndarray:
        """np.polyval-style coefficients of the monic numerator."""
        return np.concatenate([[1.0], self.coeffs])

    @property
    def denominator(self) -> np.ndarray:
        den = np.array([1.0])
        for e in self.anchors.points:
            den = np.convolve(den, [1.0, -2.0 * e.real, abs(e) ** 2])
        return den

    @property
    def delta_branch(self) -> float:
        return 1e-6 * self.anchors.diameter

    def __call__(self, z):
        """Raw vectorized evaluation of Q without pole guards."""
        z = np.asarray(z, dtype=complex)
        return np.polyval(self.numerator, z) / np.polyval(self.denominator, z)

    def with_coeffs(self, coeffs) -> "QuadraticDifferential":
        return QuadraticDifferential(self.anchors, coeffs)

    def numerator_roots(self) -> np.ndarray:
        """Roots of the numerator, companion eigenvalues plus one Newton
        polish on well-separated roots."""
        num = self.numerator
        r = np.roots(num)
        dnum = np.polyder(num)
        for k in range(len(r)):
            sep = np.abs(r - r[k])
            sep[k] = np.inf
            if sep.min() > 10 * ROOT_CLUSTER_TOL * self.anchors.diameter:
                dp = np.polyval(dnum, r[k])
                if abs(dp) > 1e-300:
                    r[k] = r[k] - np.polyval(num, r[k]) / dp
        return r

    def structure(self) -> "SurfaceStructure":
        return SurfaceStructure(self)


def eval_Q(qd: QuadraticDifferential, z: complex) -> complex:
    """Checked scalar evaluation; rejects points within delta_branch of a pole."""
    z = complex(z)
    for e in qd.anchors.points:
        if min(abs(z - e), abs(z - e.conjugate())) < qd.delta_branch:
            raise PoleEvaluation(f"{z} is within delta_branch of pole {e}")
    return complex(qd(np.array([z]))[0])


class SurfaceStructure:
    """Root classification of the numerator and the induced branch pairs.

    ``pairs`` is a list of dicts with keys:
      kind      -- 'conj' (conjugate pair of odd-order zero clusters or an
                   uncancelled pole pair) or 'real' (two adjacent odd-order
                   real clusters bounding a segment of sign change)
      points    -- the pair of branch points (upper representative first for
                   'conj'; left endpoint first for 'real')
      order     -- odd multiplicity carried by each member
    """

    def __init__(self, qd: QuadraticDifferential):
        self.qd = qd
        diam = qd.anchors.diameter
        roots = qd.numerator_roots()
        clusters = _cluster_points(roots, ROOT_CLUSTER_TOL * diam)
        # second pass: a nearly re-merged double (root pair split below the
        # merge tolerance by the iteration or by root-finder noise) carries
        # pinched cycles whose periods vanish in the merged limit, so it is
        # treated as one even-order cluster; this is the convention that
        # decides reported topology in marginal cases
        clusters, self.near_degenerate = _merge_clusters(
            clusters, ROOT_PAIR_MERGE_TOL * diam)

        real_odd = []
        conj_reps = []
        self.zero_clusters = []       # (center, multiplicity) in closed UHP
        self.cancelled_poles = []
        self.degenerate = False
        for center, mult in clusters:
            if abs(center.imag) < REAL_ROOT_TOL * diam:
                center = complex(center.real, 0.0)
                self.zero_clusters.append((center, mult))
                if mult % 2 == 1:
                    real_odd.append(center.real)
            elif center.imag > 0:
                self.zero_clusters.append((center, mult))
                if mult % 2 == 1:
                    conj_reps.append((center, mult))

        # pole cancellation: an odd-order zero cluster sitting on a pole makes
        # the total order even there (simple pole + simple zero = regular)
        self.active_poles = []
        for e in qd.anchors.points:
            cancelled = False
            for center, mult in self.zero_clusters:
                if abs(center - e) < POLE_COLLISION_TOL * diam:
                    self.degenerate = True
                    if mult % 2 == 1:
                        cancelled = True
            if cancelled:
                self.cancelled_poles.append(e)
            else:
                self.active_poles.append(e)

        self.pairs = []
        for e in self.active_poles:
            self.pairs.append({"kind": "conj", "points": (e, e.conjugate()),
                               "order": -1})
        for center, mult in conj_reps:
            # a conjugate zero pair collided with a pole pair contributes no
            # independent branch pair of its own
            if any(abs(center - e) < POLE_COLLISION_TOL * diam
                   for e in qd.anchors.points):
                continue
            self.pairs.append({"kind": "conj", "points": (center, center.conjugate()),
                               "order": mult})
        real_odd.sort()
        if len(real_odd) % 2 == 1:
            # parity of a real polynomial forbids this; tolerate by dropping
            # the furthest-out one and flagging
            self.degenerate = True
            real_odd = real_odd[:-1]
        for a, b in zip(real_odd[0::2], real_odd[1::2]):
            self.pairs.append({"kind": "real", "points": (complex(a), complex(b)),
                               "order": 1})

        self.branch_points = np.array(
            [p for pair in self.pairs for p in pair["points"]], dtype=complex)
        self.genus = max(len(self.pairs) - 1, 0)


def _merge_clusters(clusters, tol: float):
    """Union clusters whose centroids are within ``tol`` (size-weighted).

    Returns (clusters, snapped) where ``snapped`` is True when at least one
    union happened, i.e. the numerator is within the merge tolerance of a
    more degenerate stratum."""
    merged = list(clusters)
    snapped = False
    changed = True
    while changed:
        changed = False
        for i in range(len(merged)):
            for j in range(i + 1, len(merged)):
                ci, mi = merged[i]
                cj, mj = merged[j]
                if abs(ci - cj) < tol:
                    merged[i] = ((ci * mi + cj * mj) / (mi + mj), mi + mj)
                    merged.pop(j)
                    changed = snapped = True
                    break
            if changed:
                break
    return merged, snapped


def _cluster_points(points: np.ndarray, tol: float):
    """Single-linkage clustering; returns (centroid, size) pairs."""
    pts = list(points)
    clusters = []
    used = [False] * len(pts)
    for i in range(len(pts)):
        if used[i]:
            continue
        group = [i]
        used[i] = True
        frontier = [i]
        while frontier:
            a = frontier.pop()
            for j in range(len(pts)):
                if not used[j] and abs(pts[a] - pts[j]) < tol:
                    used[j] = True
                    group.append(j)
                    frontier.append(j)
        centroid = sum(pts[g] for g in group) / len(group)
        clusters.append((centroid, len(group)))
    return clusters


@dataclass
class CycleBasis:
    """Closed loops around branch pairs plus starting-branch bookkeeping."""

    loops: list            # polylines (np arrays of complex)
    genus: int
    pair_points: list      # the branch pair each loop surrounds

    def __len__(self):
        return len(self.loops)


@dataclass
class PeriodVector:
    values: np.ndarray

    @property
    def max_im(self) -> float:
        if len(self.values) == 0:
            return 0.0
        return float(np.abs(self.values.imag).max())


def _segment_clearance(others: np.ndarray, a: complex, b: complex) -> float:
    """Min distance from ``others`` to the straight segment [a, b]."""
    if len(others) == 0:
        return np.inf
    ab = b - a
    denom = abs(ab) ** 2
    if denom == 0.0:
        return float(np.abs(others - a).min())
    t = np.clip(((others - a) * np.conj(ab)).real / denom, 0.0, 1.0)
    return float(np.abs(others - (a + t * ab)).min())


def _loop_for_pair(pair, all_points: np.ndarray, margin_scale: float = 0.35,
                   pad: float = 1.0):
    """Rectangle enclosing exactly the two branch points of ``pair``.

    The margin is a fraction of the clearance between the enclosed cut
    segment and the remaining branch points, which keeps other singular
    points strictly outside (margin < clearance / sqrt(2) suffices for an
    axis-aligned rectangle).
    """
    b0, b1 = pair["points"]
    others = all_points[(np.abs(all_points - b0) > 1e-13)
                        & (np.abs(all_points - b1) > 1e-13)]
    d = _segment_clearance(others, b0, b1)
    if pair["kind"] == "conj":
        cx, top = b0.real, abs(b0.imag)
        if not np.isfinite(d):
            d = top + 1.0
        m = margin_scale * d * pad
        loop = pathint.rectangle_loop(cx, m, top + m)
    else:
        a, b = b0.real, b1.real
        if not np.isfinite(d):
            d = abs(b - a) + 1.0
        m = margin_scale * d * pad
        cx = 0.5 * (a + b)
        loop = pathint.rectangle_loop(cx, 0.5 * abs(b - a) + m, m)
    # verify enclosure: exactly the two intended points inside
    if len(others):
        xmin, xmax = loop.real.min(), loop.real.max()
        ymin, ymax = loop.imag.min(), loop.imag.max()
        inside = ((others.real > xmin) & (others.real < xmax)
                  & (others.imag > ymin) & (others.imag < ymax))
        if inside.any():
            if pad > 0.2:
                return _loop_for_pair(pair, all_points, margin_scale, pad * 0.6)
            raise QuadratureFailure("could not isolate branch pair with a loop")
    return loop


def cycle_basis(qd: QuadraticDifferential, structure: SurfaceStructure | None = None,
                margin_scale: float = 0.35) -> CycleBasis:
    """Spanning set of genus-many loops (one dependent pair loop dropped).

    The dropped loop is the conjugate pair with the greatest height, a
    deterministic choice; the sum of all pair loops is homologous to a loop
    around infinity whose period vanishes by the residue-free constraint.
    """
    st = structure or qd.structure()
    if len(st.pairs) <= 1:
        return CycleBasis([], 0, [])
    order = sorted(range(len(st.pairs)),
                   key=lambda i: (abs(st.pairs[i]["points"][0].imag),
                                  st.pairs[i]["points"][0].real))
    keep = order[:-1]
    loops, pts = [], []
    for i in keep:
        loops.append(_loop_for_pair(st.pairs[i], st.branch_points, margin_scale))
        pts.append(st.pairs[i]["points"])
    return CycleBasis(loops, st.genus, pts)


def periods(qd: QuadraticDifferential, basis: CycleBasis,
            tol: float = 1e-13) -> PeriodVector:
    """Periods of sqrt(Q) dz over the basis loops (branch-continued)."""
    st = qd.structure()
    vals = [pathint.integrate_sqrt_loop(qd, loop, st.branch_points, tol)
            for loop in basis.loops]
    return PeriodVector(np.asarray(vals, dtype=complex))


def _periods_on_frozen_loops(qd, loops, branch_points, tol):
    return np.array([pathint.integrate_sqrt_loop(qd, lp, branch_points, tol)
                     for lp in loops], dtype=complex)


def sqrtQ_along(qd: QuadraticDifferential, path, initial_branch: complex):
    """Continuous branch of sqrt(Q) at the sample points of ``path``.

    ``initial_branch`` must square to Q at the first sample.
    """
    path = np.asarray(path, dtype=complex)
    q0 = qd(np.array([path[0]]))[0]
    if abs(initial_branch ** 2 - q0) > 1e-6 * (1.0 + abs(q0)):
        raise ValueError("initial_branch does not square to Q at the path start")
    st = qd.structure()
    for b in st.branch_points:
        if np.abs(path - b).min() < qd.delta_branch:
            raise BranchJump(f"path passes within delta_branch of branch point {b}")
    return pathint.continue_branch(np.sqrt(qd(path)), initial_branch)


def residue_intensity(qd: QuadraticDifferential, rtol: float = 1e-10) -> float:
    """Coefficient I in sqrt(Q) = 1 - I/z^2 + O(z^-3).

    Contour quadrature of -z sqrt(Q) dz / (2 pi i) over a large circle with
    the branch fixed by sqrt(Q) -> 1; verified independent of the radius.
    """
    st = qd.structure()
    if len(st.branch_points):
        base = 3.0 * max(1.0, float(np.abs(st.branch_points).max()))
    else:
        base = 3.0 * max(1.0, qd.anchors.diameter)

    def contour_value(R):
        prev = None
        for n in (64, 128, 256, 512, 1024):
            th = 2.0 * np.pi * np.arange(n) / n
            z = R * np.exp(1j * th)
            w = np.sqrt(qd(z))
            # fix the branch at angle 0 to +1-ish and continue around
            if w[0].real < 0:
                w = -w
            w = pathint.continue_branch(w, w[0])
            dz = 1j * z * (2.0 * np.pi / n)
            val = -np.sum(z * w * dz) / (2j * np.pi)
            if prev is not None and abs(val - prev) < rtol:
                return val
            prev = val
        raise QuadratureFailure("residue contour did not converge")

    i1 = contour_value(base)
    i2 = contour_value(2.0 * base)
    if abs(i1 - i2) > max(1e-10, rtol * (1 + abs(i1))):
        raise QuadratureFailure("residue value depends on contour radius")
    if abs(i1.imag) > 1e-8 * (1 + abs(i1)):
        raise QuadratureFailure(f"residue intensity has imaginary part {i1.imag}")
    return float(i1.real)


def seed_naive(E: AnchorSet) -> QuadraticDifferential:
    """Perfect-square seed with double zeros at the anchor real parts."""
    num = np.array([1.0])
    for e in E.points:
        num = np.convolve(num, [1.0, -e.real])
    num = np.convolve(num, num)
    return QuadraticDifferential(E, num[1:])


def seed_double_zeros(E: AnchorSet, points) -> QuadraticDifferential:
    """Perfect-square seed with double zeros at ``points`` and conjugates.

    ``points`` lists one representative per conjugate pair (real entries give
    a real double zero); their multiset of real parts must average to the
    anchor mean so the residue-free constraint holds.
    """
    base = np.array([1.0])
    for p in points:
        p = complex(p)
        if abs(p.imag) < 1e-14:
            base = np.convolve(base, [1.0, -p.real])
        else:
            base = np.convolve(base, [1.0, -2.0 * p.real, abs(p) ** 2])
    num = np.convolve(base, base)
    if len(num) != 2 * E.N + 1:
        raise ValueError("seed degree does not match the anchor count")
    return QuadraticDifferential(E, num[1:])


def _fresh_residual(qd: QuadraticDifferential, quad_tol: float):
    """Residual of the real-period conditions on freshly built cycles."""
    st = qd.structure()
    basis = cycle_basis(qd, st)
    if not basis.loops:
        return 0.0, np.zeros(0), st, basis
    p = _periods_on_frozen_loops(qd, basis.loops, st.branch_points, quad_tol)
    r = p.imag.copy()
    return float(np.abs(r).max()), r, st, basis



def snap_numerator(qd: QuadraticDifferential) -> QuadraticDifferential:
    """Project the numerator onto its detected (merged) cluster structure.

    Near-double roots split below the merge tolerance are replaced by exact
    multiple roots at the cluster centroids; the residue-free c_1 stays
    pinned.  Used to polish solutions that converged next to a degenerate
    stratum, where the splitting direction is unconstrained by the periods.
    """
    st = qd.structure()
    diam = qd.anchors.diameter
    num = np.array([1.0])
    for center, mult in st.zero_clusters:
        if abs(center.imag) < REAL_ROOT_TOL * diam or abs(center.imag) < 1e-6 * diam:
            num = np.convolve(num, np.polynomial.polynomial.polyfromroots(
                [center.real] * mult)[::-1])
        elif center.imag > 0:
            pair = np.array([1.0, -2.0 * center.real, abs(center) ** 2])
            p = np.array([1.0])
            for _ in range(mult):
                p = np.convolve(p, pair)
            num = np.convolve(num, p)
    if len(num) != 2 * qd.N + 1:
        return qd
    coeffs = num[1:].real.copy()
    coeffs[0] = qd.coeffs[0]
    return qd.with_coeffs(coeffs)

def solve_boutroux(E: AnchorSet, seed: QuadraticDifferential | str | None = None,
                   target_genus: int | None = None, tol: float = 1e-10,
                   max_iter: int = 100, quad_tol: float = 1e-12,
                   fd_step: float = 1e-7, _snap_pass: int = 0):
    """Adjust (c_2, ..., c_2N) until all cycle periods are real.

    Damped Gauss-Newton on the imaginary parts of the periods.  Jacobian
    columns are finite differences on loops frozen within an iteration, but
    the line search scores trial points on freshly detected structure, so
    the iteration survives root rearrangements (double real zeros splitting
    into conjugate pairs and back).  Returns ``(qd, diagnostics)``.
    """
    if seed is None or seed == "naive":
        qd = seed_naive(E)
    elif isinstance(seed, str):
        qd = seed_preset(E, seed)
    else:
        qd = seed
        if qd.anchors.points != E.points:
            raise ValueError("seed anchors disagree with E")

    diag = {"residual_history": [], "iterations": 0, "degenerate": False,
            "genus": None, "cycle_count_history": []}
    x = np.array(qd.coeffs[1:], dtype=float)
    c1 = qd.coeffs[0]

    def make_qd(xv):
        return qd.with_coeffs(np.concatenate([[c1], xv]))

    res, r, st, basis = _fresh_residual(make_qd(x), quad_tol)
    best_recent = res
    since_best = 0
    for it in range(max_iter):
        diag["cycle_count_history"].append(len(basis.loops))
        diag["residual_history"].append(res)
        diag["iterations"] = it
        if res < tol:
            break

        cur = make_qd(x)
        J = np.zeros((len(r), len(x)))
        for k in range(len(x)):
            h = fd_step * max(1.0, abs(x[k]))
            xp = x.copy()
            xp[k] += h
            pk = _periods_on_frozen_loops(make_qd(xp), basis.loops,
                                          st.branch_points, quad_tol)
            J[:, k] = (pk.imag - r) / h

        dx, *_ = np.linalg.lstsq(J, -r, rcond=None)
        if not np.all(np.isfinite(dx)) or np.linalg.norm(dx) > 1e6:
            raise NewtonDivergence("step blow-up in the period solve")

        # backtracking scored on the fresh-structure sup residual; keep the
        # best rejected trial as a non-monotone fallback
        accepted = False
        fallback = None
        alpha = 1.0
        while alpha > 2e-4:
            trial = x + alpha * dx
            try:
                t_res, t_r, t_st, t_basis = _fresh_residual(make_qd(trial), quad_tol)
            except (BranchJump, QuadratureFailure):
                alpha *= 0.5
                continue
            if t_res <= (1.0 - 1e-4 * alpha) * res:
                x, res, r, st, basis = trial, t_res, t_r, t_st, t_basis
                accepted = True
                break
            if fallback is None or t_res < fallback[1]:
                fallback = (trial, t_res, t_r, t_st, t_basis)
            alpha *= 0.5
        if not accepted:
            if fallback is not None and fallback[1] < 1.2 * res:
                x, res, r, st, basis = fallback
            else:
                raise NewtonDivergence(
                    f"line search stalled at residual {res:.3e} (iteration {it})")

        if res < 0.8 * best_recent:
            best_recent, since_best = res, 0
        else:
            since_best += 1
            if since_best > 10:
                raise NewtonDivergence(
                    f"stagnated at residual {res:.3e} after {it + 1} iterations")
    else:
        raise NewtonDivergence(
            f"no convergence in {max_iter} iterations "
            f"(last residual {diag['residual_history'][-1]:.3e})")

    solved = make_qd(x)
    st = solved.structure()
    if getattr(st, "near_degenerate", False) and _snap_pass < 2:
        snapped = snap_numerator(solved)
        try:
            return solve_boutroux(E, seed=snapped, target_genus=target_genus,
                                  tol=tol, max_iter=max_iter, quad_tol=quad_tol,
                                  fd_step=fd_step, _snap_pass=_snap_pass + 1)
        except NewtonDivergence:
            pass
    diag["genus"] = st.genus
    diag["degenerate"] = st.degenerate
    if st.degenerate:
        diag["degenerate_note"] = (
            "numerator root within collision tolerance of a pole; the pair "
            "was cancelled and the anchor is not a spectrum endpoint")
    if target_genus is not None and st.genus != target_genus:
        diag["genus_mismatch"] = (st.genus, target_genus)
    # final validation on fresh loops at tighter quadrature tolerance
    basis = cycle_basis(solved, st)
    final = periods(solved, basis, min(quad_tol, 1e-13))
    diag["final_max_im_period"] = final.max_im
    if final.max_im > 10 * tol and len(basis.loops):
        raise NewtonDivergence(
            f"converged on frozen loops but fresh-loop residual is {final.max_im:.3e}")
    return solved, diag


def seed_preset(E: AnchorSet, name: str, scan_points: int = 33) -> QuadraticDifferential:
    """Structured seeds found by scanning a one-parameter numerator stratum.

    'naive'  -- perfect squares at the anchor real parts.
    'square' -- double-zero pair family (z - p)^2 (z - conj p)^2 over the pair
                height (negative heights mean real double zeros); covers both
                grounded columns and floating arches for two anchors.
    'tree'   -- foot-and-junction family (z - f)^2 (z - j)(z - conj j), the
                mutually connected spectra that also touch the axis.

    The scan locates the best candidate and bisects the dominant period
    component between bracketing scan points when it changes sign, so the
    Newton polish starts essentially on the target stratum.
    """
    if name == "naive":
        return seed_naive(E)
    if E.N != 2:
        raise ValueError(f"preset {name!r} is for two-anchor sets")
    heights = np.array([e.imag for e in E.points])
    mean_re = float(np.mean([e.real for e in E.points]))
    hmax = float(heights.max())

    if name == "square":
        def make(t):
            if t >= 0:
                return seed_double_zeros(E, [mean_re + 1j * math.sqrt(t)])
            r = math.sqrt(-t)
            return seed_double_zeros(E, [mean_re - r, mean_re + r])
        ts = np.linspace(-4.0 * hmax ** 2, 4.0 * hmax ** 2, scan_points)
    elif name == "tree":
        def make(t):
            num = np.convolve(
                np.convolve([1.0, -mean_re], [1.0, -mean_re]),
                [1.0, -2.0 * mean_re, mean_re ** 2 + t ** 2])
            return QuadraticDifferential(E, num[1:])
        ts = np.linspace(0.05 * float(heights.min()), 1.6 * hmax, scan_points)
    else:
        raise ValueError(f"unknown seed preset {name!r}")

    def residual_at(t):
        qd = make(t)
        res, _, _, _ = _fresh_residual(qd, 1e-9)
        return res, qd

    best = None
    best_t = None
    vals = {}
    for t in ts:
        try:
            res, qd = residual_at(t)
        except (BranchJump, QuadratureFailure, ValueError):
            continue
        vals[t] = res
        if best is None or res < best[0]:
            best, best_t = (res, qd), t
    if best is not None and best[0] > 0:
        # golden-section refine of the (branch-sign-free) residual magnitude
        span = float(ts[1] - ts[0])
        a, b = best_t - span, best_t + span
        gr = 0.5 * (math.sqrt(5.0) - 1.0)
        c, d = b - gr * (b - a), a + gr * (b - a)
        try:
            fc, qc_ = residual_at(c)
            fd, qd_ = residual_at(d)
            for _ in range(45):
                if fc < fd:
                    b, d, fd, qd_ = d, c, fc, qc_
                    c = b - gr * (b - a)
                    fc, qc_ = residual_at(c)
                else:
                    a, c, fc, qc_ = c, d, fd, qd_
                    d = a + gr * (b - a)
                    fd, qd_ = residual_at(d)
            cand = (fc, qc_) if fc < fd else (fd, qd_)
            if cand[0] < best[0]:
                best = cand
        except (BranchJump, QuadratureFailure, ValueError):
            pass
    if best is None:
        raise NewtonDivergence("seed scan found no usable candidate")
    return best[1]


def _best_of_scan(E: AnchorSet, candidate_zero_sets, square: bool = True):
    """Pick the candidate numerator with the smallest fresh period residual."""
    best, best_res = None, np.inf
    for zeros in candidate_zero_sets:
        try:
            if square:
                cand = seed_double_zeros(E, zeros)
            else:
                num = np.array([1.0])
                for p in zeros:
                    p = complex(p)
                    if abs(p.imag) < 1e-14:
                        num = np.convolve(num, np.convolve([1.0, -p.real], [1.0, -p.real]))
                    else:
                        num = np.convolve(num, [1.0, -2.0 * p.real, abs(p) ** 2])
                if len(num) != 2 * E.N + 1:
                    continue
                cand = QuadraticDifferential(E, num[1:])
        except ValueError:
            continue
        try:
            res, *_ = _fresh_residual(cand, 1e-8)
        except (BranchJump, QuadratureFailure):
            continue
        if res < best_res:
            best, best_res = cand, res
    if best is None:
        raise NewtonDivergence("seed scan found no usable candidate")
    return best


def verify_homologous_basis(qd: QuadraticDifferential, quad_tol: float = 1e-13):
    """Recompute periods on a homologous basis (wider loops); returns the
    max absolute difference pairwise with the standard basis."""
    st = qd.structure()
    b1 = cycle_basis(qd, st, margin_scale=0.35)
    b2 = cycle_basis(qd, st, margin_scale=0.55)
    p1 = periods(qd, b1, quad_tol).values
    p2 = periods(qd, b2, quad_tol).values
    if len(p1) == 0:
        return 0.0
    return float(np.abs(p1 - p2).max())


def serialize(qd: QuadraticDifferential, tol: float | None = None) -> dict:
    st = qd.structure()
    return {
        "anchors": [[e.real, e.imag] for e in qd.anchors.points],
        "coeffs": [float(c) for c in qd.coeffs],
        "tol": tol,
        "genus": st.genus,
    }


def deserialize(payload: dict) -> QuadraticDifferential:
    E = AnchorSet([complex(a, b) for a, b in payload["anchors"]])
    return QuadraticDifferential(E, payload["coeffs"])
