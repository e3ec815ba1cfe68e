"""Machine checks of the optimality theory at desk scale.

Everything here treats the solvers as black boxes and tests their outputs
against independent constructions: one-sided finite differences of the
Green potential for the equal-normal-derivatives property, steepest-ascent
interception for the energy ordering, constrained descent against traced
spectra, the rational-square certificate for criticality of a support, and
perturbation probes for continuity of the energy functional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import equilibrium as eqm
from .equilibrium import EquilibriumMeasure, ExternalField, QuasimomentumField
from .errors import (ClassEscape, DeformationLeftClass, NoConvergence,
                     StalledAtStagnation, TooCloseToEndpoint)
from .geom import (AnchorSet, Arc, ConnectivityMatrix, PolyContinuum,
                   class_membership, connectivity_of, hausdorff_distance)

AMBIGUOUS_FLOOR = 1e-8     # mismatch below this counts as an S-point
ENDPOINT_EXCLUSION = 0.05  # fraction of arclength excluded at each arc end


def _fd_normal_derivatives(m: EquilibriumMeasure, arc: int, s: float,
                           h: float | None = None):
    """One-sided dV/dn on both sides by offsets h, 2h with Richardson.

    V = Im Phi - G; the on-curve value uses the boundary data, so failures
    of the solved potential to meet it show up as genuine mismatch.
    """
    par = m._params[arc]
    diam = max(m.support.diameter, 1e-12)
    h = h or 1e-4 * diam
    z = complex(par.point(s))
    n_plus = 1j * complex(par.tangent(s))

    def V(pts):
        pts = np.asarray(pts, dtype=complex)
        return m.field.im_phi(pts) - m.green_potential(pts)

    v0 = 0.0  # boundary condition value of V on the support
    vp = V(np.array([z + h * n_plus, z + 2 * h * n_plus]))
    vm = V(np.array([z - h * n_plus, z - 2 * h * n_plus]))
    dvp = (4.0 * vp[0] - vp[1] - 3.0 * v0) / (2.0 * h)
    dvm = (4.0 * vm[0] - vm[1] - 3.0 * v0) / (2.0 * h)
    return float(dvp), float(dvm)


@dataclass
class MismatchProfile:
    arc: int
    s: np.ndarray
    normal_plus: np.ndarray
    normal_minus: np.ndarray
    mismatch: np.ndarray
    u_tilde_derivative: np.ndarray

    def identity_residual(self) -> float:
        """Sup |mismatch + 2 d(u~)/ds| (the tangential-derivative identity)."""
        return float(np.abs(self.mismatch + 2.0 * self.u_tilde_derivative).max())


def mismatch_profile(m: EquilibriumMeasure, arc: int,
                     n_samples: int = 17) -> MismatchProfile:
    """Finite-difference normal mismatch along one arc plus the tangential
    derivative of the averaged boundary value for the jump identity."""
    par = m._params[arc]
    L = par.length
    ss = np.linspace(ENDPOINT_EXCLUSION * L, (1 - ENDPOINT_EXCLUSION) * L, n_samples)
    dvp = np.empty(n_samples)
    dvm = np.empty(n_samples)
    dut = np.empty(n_samples)
    for k, s in enumerate(ss):
        dvp[k], dvm[k] = _fd_normal_derivatives(m, arc, float(s))
        dut[k] = m.normal_data(arc, float(s))[4]
    return MismatchProfile(arc, ss, dvp, dvm, dvp - dvm, dut)


def s_property_residual(m: EquilibriumMeasure, n_samples: int = 17,
                        report_excluded: bool = False):
    """Max |dV/dn+ - dV/dn-| over interior samples of every arc.

    Samples inside the endpoint grading zone are excluded (and reported
    when asked): the one-sided differences are not meaningful against the
    inverse-square-root density blowup there.
    """
    worst = 0.0
    excluded = []
    for ai in range(len(m.support.arcs)):
        prof = mismatch_profile(m, ai, n_samples)
        worst = max(worst, float(np.abs(prof.mismatch).max()))
        L = m._params[ai].length
        excluded.append((ai, 0.0, ENDPOINT_EXCLUSION * L))
        excluded.append((ai, (1 - ENDPOINT_EXCLUSION) * L, L))
    if report_excluded:
        return worst, excluded
    return worst


def dominant_side(m: EquilibriumMeasure, arc: int, s: float,
                  noise_floor: float = AMBIGUOUS_FLOOR):
    """Side with the larger dV/dn at arclength ``s`` of ``arc``.

    Returns (side, strength, ambiguous, cross_check) where side is 'plus' or
    'minus' relative to n_plus = i * tangent, strength the mismatch size, and
    cross_check the tangential-integral value -2 d(u~)/ds that must agree
    with the finite differences.
    """
    par = m._params[arc]
    L = par.length
    if not (ENDPOINT_EXCLUSION * L <= s <= (1 - ENDPOINT_EXCLUSION) * L):
        raise TooCloseToEndpoint(
            f"s={s} inside the endpoint grading zone of arc {arc}")
    dvp, dvm = _fd_normal_derivatives(m, arc, s)
    mism = dvp - dvm
    cross = -2.0 * m.normal_data(arc, s)[4]
    ambiguous = abs(mism) < noise_floor * max(1.0, abs(dvp) + abs(dvm))
    side = "plus" if mism >= 0 else "minus"
    return side, abs(mism), ambiguous, cross


def orthogonal_trajectory(f: QuasimomentumField, z: complex, side: str,
                          targets: PolyContinuum | None = None,
                          hit_tol: float | None = None,
                          max_steps: int = 30_000, v_cap: float | None = None):
    """Steepest-ascent curve of V from a support point on the given side.

    Follows dz/ds = i conj(P') / |P'| (unit-speed ascent of Im P) until it
    hits ``targets``, stalls at a stagnation point (both continuations are
    then explored by the caller), or escapes.  Escape is declared either at
    the escape radius or when the accumulated ascent exceeds the largest
    possible V value on the target's hit neighbourhood, after which a hit
    is impossible because V only increases along the curve.

    Returns (polyline, outcome, hit_point), outcome in {'hit', 'escaped',
    'stalled'}.
    """
    m = f.measure
    K = m.support
    diam = max(K.diameter, 1e-9)
    r_esc = 50.0 * diam
    hit_tol = hit_tol or 5e-3 * diam
    stall_tol = 1e-7
    h_min = 1e-3 * diam
    h_max = 0.5 * diam

    # lean tiered field evaluator (scalar, precomputed rules)
    rules = {}
    for t in (0, 2, 4, 16):
        if t == 0:
            w, uw = m.nodes, m.density * m.weights
        else:
            w, uw = m._fine_rule(t)
        rules[t] = (w, 2.0 * w.imag * uw)
    hscale = m.panel_scale

    from scipy.spatial import cKDTree
    sup_dense = K.resampled(1e-3 * diam)
    sup_tree = cKDTree(np.column_stack([sup_dense.real, sup_dense.imag]))

    def dP(zz: complex):
        d = sup_tree.query([zz.real, zz.imag])[0]
        d = min(d, abs(zz.imag) + d)  # reflection never closer than Im z
        tier = 0 if d > 0.5 * hscale else (2 if d > 0.15 * hscale
                                           else (4 if d > 0.08 * hscale else 16))
        w, nu = rules[tier]
        gp = np.sum(nu / ((zz - np.conj(w)) * (zz - w)))
        return complex(f.field.dphi(np.array([zz]))[0] - gp), d

    tgt_tree = None
    if targets is not None:
        tdense = targets.resampled(hit_tol / 2.0)
        tgt_tree = cKDTree(np.column_stack([tdense.real, tdense.imag]))
        if v_cap is None:
            v_cap = float(tdense.imag.max()) + 2.0 * hit_tol

    # starting offset off the support along the requested normal
    d0 = K.fast_distance(np.array([z]))[0]
    if d0 > 1e-6 * diam:
        z0, n_hat = complex(z), None
    else:
        best = (np.inf, None, None)
        for ai in range(len(K.arcs)):
            par = m._params[ai]
            ss = np.linspace(0, par.length, 257)
            zz = par.point(ss)
            j = int(np.abs(zz - z).argmin())
            if abs(zz[j] - z) < best[0]:
                best = (abs(zz[j] - z), ai, float(ss[j]))
        par = m._params[best[1]]
        n_hat = 1j * complex(par.tangent(best[2]))
        if side == "minus":
            n_hat = -n_hat
        z0 = complex(z) + 2e-4 * diam * n_hat

    pts = [complex(z), z0] if n_hat is not None else [complex(z)]
    zc = z0
    v_accum = 0.0
    outcome, hit = "escaped", None
    for step in range(max_steps):
        dp1, dist1 = dP(zc)
        a1 = abs(dp1)
        if a1 < stall_tol:
            outcome = "stalled"
            break
        h = min(max(0.12 * dist1, h_min), h_max)
        if tgt_tree is not None:
            # never step across the target at more than the hit tolerance
            d_tgt = tgt_tree.query([zc.real, zc.imag])[0]
            h = min(h, max(0.35 * d_tgt, 0.9 * hit_tol))
        d1 = 1j * np.conj(dp1) / a1
        dp2, _ = dP(zc + 0.5 * h * d1)
        a2 = abs(dp2)
        if a2 < stall_tol:
            outcome = "stalled"
            break
        znew = zc + h * (1j * np.conj(dp2) / a2)
        if znew.imag < 0:
            znew = complex(znew.real, 1e-9 * diam)
        v_accum += 0.5 * (a1 + a2) * h
        pts.append(znew)
        zc = znew
        if tgt_tree is not None:
            if tgt_tree.query([zc.real, zc.imag])[0] < hit_tol:
                outcome, hit = "hit", zc
                break
            if v_cap is not None and v_accum > v_cap + abs(pts[0].imag):
                outcome = "escaped"
                break
        if abs(zc) > r_esc:
            outcome = "escaped"
            break
    return np.asarray(pts, dtype=complex), outcome, hit


def _explore_saddle(f, pts, targets, hit_tol):
    """Continue an ascent stalled at a saddle along both ascent branches."""
    z_s = pts[-1]
    d2 = f.d2P(np.array([z_s]))[0]
    if abs(d2) < 1e-12:
        return []
    # ascent directions of Im P at a simple saddle: d with d2 * d^2 = i|d2|
    d0 = np.sqrt(1j * abs(d2) / d2)
    out = []
    m = f.measure
    eps = 1e-3 * max(m.support.diameter, 1e-9)
    for sgn in (1.0, -1.0):
        out.append(orthogonal_trajectory(f, z_s + sgn * eps * d0, "plus",
                                         targets=targets, hit_tol=hit_tol))
    return out


@dataclass
class InterceptionReport:
    records: list
    overall: bool
    s_property: bool
    n_ambiguous: int = 0

    def summary(self) -> dict:
        hits = sum(1 for r in self.records if r["hit"])
        return {"samples": len(self.records), "hits": hits,
                "overall": self.overall, "s_property": self.s_property,
                "ambiguous": self.n_ambiguous}


def jenkins_check(F_measure: EquilibriumMeasure, K: PolyContinuum,
                  n_samples: int = 24, s_threshold: float = 1e-5,
                  hit_tol: float | None = None) -> InterceptionReport:
    """Interception test of the candidate ``K`` against the reference support.

    At each interior sample of the reference: when the reference has the
    equal-normal-derivatives property the tested trajectory may leave on
    either side (a start point already on ``K`` counts as an immediate hit);
    otherwise only the dominant side counts.  Escapes count as misses.
    """
    f = eqm.quasimomentum(F_measure)
    Fk = F_measure.support
    diam = max(Fk.diameter, 1e-9)
    hit_tol = hit_tol or 5e-3 * diam
    s_res = s_property_residual(F_measure, n_samples=9)
    is_s = s_res < s_threshold

    total_len = sum(m_.length for m_ in F_measure._params)
    records = []
    n_amb = 0
    for ai, par in enumerate(F_measure._params):
        L = par.length
        k = max(2, int(round(n_samples * L / total_len)))
        ss = np.linspace(ENDPOINT_EXCLUSION * L, (1 - ENDPOINT_EXCLUSION) * L, k)
        for s in ss:
            z = complex(par.point(float(s)))
            rec = {"z": z, "arc": ai, "s": float(s), "hit": False,
                   "side": None, "escaped": False}
            if np.abs(K.resampled(hit_tol / 2) - z).min() < hit_tol:
                rec["hit"] = True
                rec["side"] = "start"
                records.append(rec)
                continue
            side, strength, ambiguous, _ = dominant_side(F_measure, ai, float(s))
            n_amb += int(ambiguous)
            sides = ("plus", "minus") if (is_s or ambiguous) else (side,)
            rec["side"] = sides[0] if len(sides) == 1 else "either"
            for sd in sides:
                path, outcome, hitpt = orthogonal_trajectory(
                    f, z, sd, targets=K, hit_tol=hit_tol)
                if outcome == "stalled":
                    for path2, out2, hp2 in _explore_saddle(f, path, K, hit_tol):
                        if out2 == "hit":
                            outcome, hitpt = "hit", hp2
                            break
                if outcome == "hit":
                    rec["hit"] = True
                    rec["hit_point"] = hitpt
                    break
            rec["escaped"] = not rec["hit"]
            records.append(rec)
    overall = all(r["hit"] for r in records)
    return InterceptionReport(records, overall, is_s, n_amb)


@dataclass
class ProbeRecord:
    theta: float
    intensity: float
    margin: float
    in_class: bool


def energy_inequality_probe(E: AnchorSet, M: ConnectivityMatrix,
                            family, thetas, reference: float,
                            tol_energy: float = 1e-4,
                            solver_kwargs: dict | None = None):
    """Energies of a deformation family against a reference minimum.

    ``family(theta) -> PolyContinuum``.  Members leaving the connectivity
    class are excluded and reported.  Returns (records, ok) where ok means
    every in-class margin exceeded -tol_energy.
    """
    solver_kwargs = solver_kwargs or {}
    records = []
    for th in thetas:
        K = family(th)
        try:
            in_class = class_membership(K, E, M)
        except Exception:
            in_class = False
        if not in_class:
            records.append(ProbeRecord(float(th), np.nan, np.nan, False))
            continue
        m = eqm.solve_equilibrium(K, **solver_kwargs)
        val = m.intensity_measure()
        records.append(ProbeRecord(float(th), val, val - reference, True))
    ok = all(r.margin >= -tol_energy for r in records if r.in_class)
    return records, ok


class SplineContourFamily:
    """Contours from arc specs with endpoint and bulge parameters.

    Each arc spec is a pair of endpoint descriptors from:
      ('anchor', j)    -- pinned to anchor j
      ('ground', x0)   -- on the real axis, abscissa is a parameter
      ('junction', k)  -- shared movable junction k (complex parameter)
    Interior shape is parametrized by ``n_ctrl`` normal offsets from the
    straight endpoint chord at fixed fractions, which keeps rigid swings
    and bulges along separate, well-scaled coordinate axes.  The contour is
    a chord-parametrized cubic spline through the resulting points.
    """

    def __init__(self, E: AnchorSet, arc_specs, n_ctrl: int = 3,
                 samples_per_arc: int = 160):
        self.E = E
        self.specs = list(arc_specs)
        self.n_ctrl = n_ctrl
        self.samples = samples_per_arc
        self._junctions = sorted({d[1] for spec in self.specs for d in spec
                                  if d[0] == "junction"})
        self._fracs = np.linspace(0.0, 1.0, n_ctrl + 2)[1:-1]

    def n_params(self) -> int:
        n_g = sum(1 for spec in self.specs for d in spec if d[0] == "ground")
        return n_g + 2 * len(self._junctions) + self.n_ctrl * len(self.specs)

    def initial_params(self, seeds=None):
        """Straight-chord contour; ``seeds`` may override ('ground', arc_i),
        ('junction', k) and ('offsets', arc_i)."""
        seeds = seeds or {}
        x = []
        for i, spec in enumerate(self.specs):
            for d in spec:
                if d[0] == "ground":
                    x.append(float(seeds.get(("ground", i), d[1])))
        for k in self._junctions:
            default = complex(np.mean([self.E.points[d[1]]
                                       for spec in self.specs for d in spec
                                       if d[0] == "anchor"])) * 0.6
            j = complex(seeds.get(("junction", k), default))
            x += [j.real, j.imag]
        for i in range(len(self.specs)):
            off = seeds.get(("offsets", i), np.zeros(self.n_ctrl))
            x += list(np.asarray(off, dtype=float))
        return np.asarray(x, dtype=float)

    def _unpack(self, x):
        n_g = sum(1 for spec in self.specs for d in spec if d[0] == "ground")
        grounds = list(x[:n_g])
        k = n_g
        juncs = []
        for _ in self._junctions:
            juncs.append(complex(x[k], x[k + 1]))
            k += 2
        offs = []
        for _ in self.specs:
            offs.append(np.asarray(x[k:k + self.n_ctrl], dtype=float))
            k += self.n_ctrl
        return grounds, juncs, offs

    def _endpoint_map(self, grounds, juncs):
        gi = iter(grounds)
        out = []
        for spec in self.specs:
            ends = []
            for d in spec:
                if d[0] == "anchor":
                    ends.append(self.E.points[d[1]])
                elif d[0] == "ground":
                    ends.append(complex(next(gi), 0.0))
                else:
                    ends.append(juncs[self._junctions.index(d[1])])
            out.append(tuple(ends))
        return out

    def build(self, x) -> PolyContinuum:
        from scipy.interpolate import CubicSpline
        grounds, juncs, offs = self._unpack(x)
        endpoints = self._endpoint_map(grounds, juncs)
        scale = max(self.E.diameter, 1.0)
        arcs = []
        for (a, b), eta in zip(endpoints, offs):
            chord = b - a
            if abs(chord) < 1e-9 * scale:
                raise ClassEscape("degenerate arc endpoints")
            n_hat = 1j * chord / abs(chord)
            knots = np.concatenate([[a], a + self._fracs * chord
                                    + eta * n_hat, [b]])
            if np.any(knots.imag < -1e-12) or np.any(np.abs(knots) > 6 * scale):
                raise ClassEscape("control point outside the admissible region")
            t = np.concatenate([[0.0], np.cumsum(np.abs(np.diff(knots)))])
            if t[-1] <= 0:
                raise ClassEscape("degenerate arc")
            t = t / t[-1]
            csx = CubicSpline(t, knots.real)
            csy = CubicSpline(t, knots.imag)
            tt = np.linspace(0.0, 1.0, self.samples)
            zz = csx(tt) + 1j * np.maximum(csy(tt), 0.0)
            arc = Arc(zz, validate=False)
            if arc.length > 4.0 * abs(chord):
                raise ClassEscape("arc length blew up")
            arcs.append(arc)
        return PolyContinuum(arcs)


def minimize_in_class(E: AnchorSet, M: ConnectivityMatrix,
                      parametrization: SplineContourFamily, seed_params,
                      budget: int = 400, solver_kwargs: dict | None = None,
                      xtol: float = 1e-4):
    """Derivative-free descent of the intensity over the contour family.

    Steps whose contour leaves the class are rejected through a large
    penalty.  Returns (K_best, measure, params, history).
    """
    solver_kwargs = solver_kwargs or dict(nodes_per_panel=8, n_panels=4,
                                          refine_levels=9)
    history = []

    def objective(x):
        try:
            K = parametrization.build(x)
            if not class_membership(K, E, M):
                return 1e6
            m = eqm.solve_equilibrium(K, strict=False, **solver_kwargs)
            val = m.intensity_measure()
        except Exception:
            return 1e6
        # a corrupted low-resolution solve shows up as signed density or a
        # nonpositive energy, both impossible for the default field
        dmax = float(np.abs(m.density).max())
        if (val <= 0.0 or not np.isfinite(val)
                or float(m.density.min()) < -1e-4 * max(dmax, 1e-12)
                or m.diagnostics["condition"] > 1e12):
            return 1e6
        history.append(val)
        return val

    res = minimize(objective, np.asarray(seed_params, dtype=float),
                   method="Powell",
                   options={"maxfev": budget, "xtol": xtol, "ftol": 1e-10})
    if not np.isfinite(res.fun) or res.fun >= 1e6:
        raise NoConvergence("descent never produced an in-class contour")
    K = parametrization.build(res.x)
    m = eqm.solve_equilibrium(K, strict=False, **solver_kwargs)
    return K, m, res.x, history


@dataclass
class SchifferCertificate:
    coefficients: np.ndarray
    residual: float
    degree_bound: int
    points: np.ndarray
    values: np.ndarray

    @property
    def critical(self) -> bool:
        return self.residual < 1e-5


def schiffer_certificate(m: EquilibriumMeasure, E: AnchorSet,
                         field: ExternalField | None = None,
                         n_points: int | None = None,
                         radius_factor: float = 1.25) -> SchifferCertificate:
    """Rational-square criticality certificate for the support of ``m``.

    Evaluates F(x) = E(x) [ P'(x)^2 - Phi'(x)^2 ] with E the monic anchor
    polynomial and P' = Phi' - g'; on a critical support F is a real
    polynomial of degree at most 2N + r - 2, so the sup misfit of a
    least-squares fit certifies (or refutes) criticality.
    """
    field = field or m.field
    if m.field != field:
        raise ValueError("certificate field must match the solved field")
    N = E.N
    r = field.degree
    deg = 2 * N + r - 2
    n_points = n_points or max(24, 3 * (4 * N + 2 * r))

    allz = m.support.all_samples()
    c0 = complex(np.mean(allz))
    Rad = radius_factor * max(np.abs(allz - c0).max(), 0.5 * m.support.diameter)
    th = np.linspace(0.15, np.pi - 0.15, n_points)
    pts = c0.real + Rad * np.exp(1j * th)
    # keep sample points clear of the support and its reflection
    d = np.minimum(m.support.distance_to(pts), m.support.distance_to(pts.conj()))
    pts = pts[d > 0.1 * Rad]

    f = eqm.quasimomentum(m)
    dp = f.dP(pts)
    dphi = field.dphi(pts)
    Epoly = np.array([1.0])
    for e in E.points:
        Epoly = np.convolve(Epoly, [1.0, -2.0 * e.real, abs(e) ** 2])
    F = np.polyval(Epoly, pts) * (dp ** 2 - dphi ** 2)

    # real-coefficient least squares on stacked real/imaginary parts
    V = np.vander(pts, deg + 1)
    A = np.vstack([V.real, V.imag])
    b = np.concatenate([F.real, F.imag])
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    misfit = np.abs(F - np.polyval(coef, pts))
    scale = max(1.0, float(np.abs(F).max()))
    return SchifferCertificate(coef, float(misfit.max() / scale), deg, pts, F)


def continuity_probe(K: PolyContinuum, epsilons,
                     solver_kwargs: dict | None = None):
    """|I(K_eps) - I(K)| for normal bump displacements of size eps.

    K_eps displaces every arc by eps * sin(pi s / L) along the normal,
    endpoints fixed.  Returns a list of (eps, difference).
    """
    solver_kwargs = solver_kwargs or {}
    base = eqm.solve_equilibrium(K, **solver_kwargs).intensity_measure()
    out = []
    for ep in epsilons:
        arcs = []
        for a in K.arcs:
            s = a.cumlen
            L = max(a.length, 1e-12)
            tang = np.gradient(a.samples, s) if len(a.samples) > 2 else np.ones_like(a.samples)
            tang = tang / np.abs(tang)
            bump = np.sin(np.pi * s / L)
            zz = a.samples + ep * bump * (1j * tang)
            zz = zz.real + 1j * np.maximum(zz.imag, 0.0)
            arcs.append(Arc(zz, validate=False))
        Ke = PolyContinuum(arcs)
        val = eqm.solve_equilibrium(Ke, **solver_kwargs).intensity_measure()
        out.append((float(ep), abs(val - base)))
    return out


def lift_probe(K: PolyContinuum, heights, solver_kwargs: dict | None = None):
    """Intensity of the contour raised by i*h for h in ``heights``."""
    solver_kwargs = solver_kwargs or {}
    out = []
    for h in heights:
        arcs = [Arc(a.samples + 1j * h, validate=False) for a in K.arcs]
        val = eqm.solve_equilibrium(PolyContinuum(arcs),
                                    **solver_kwargs).intensity_measure()
        out.append((float(h), val))
    return out
