"""Condensate equilibrium problem on an arbitrary poly-continuum.

Solves the first-kind boundary integral equation

    int_K ln| (z - conj w) / (z - w) | u(w) |dw|  =  Im Phi(z),   z on K,

for the density u of the equilibrium measure (default field Phi(z) = z).
Discretization is per-arc panel collocation: panels touching a free tip use
the square-root substitution that absorbs the dist^(-1/2) endpoint behaviour
of the density, interior panels are plain Gauss-Legendre, and the kernel is
integrated by dyadically refined product quadrature whenever the target
point sits on or near the source panel.

The solved measure exposes three independent intensity routes (moment,
far-field residue, Dirichlet grid), near-field-safe potential evaluation,
principal-value tangential data for the normal-derivative jump relations,
and stagnation-point counting by the argument principle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import pathint
from .errors import (CountMismatch, EvaluationOnSupport, FieldMismatch,
                     GridTooCoarse, IllConditioned, NegativeDensity)
from .geom import Arc, PolyContinuum

COND_THRESHOLD = 1e10


class ExternalField:
    """Polynomial external field with real coefficients (t_1, ..., t_r)."""

    def __init__(self, coeffs=(1.0,)):
        c = np.asarray(coeffs, dtype=float)
        if c.ndim != 1 or len(c) == 0:
            raise ValueError("field needs at least one coefficient")
        if c[-1] <= 0:
            raise ValueError("leading field coefficient must be positive")
        c.setflags(write=False)
        self.coeffs = c

    @property
    def degree(self) -> int:
        return len(self.coeffs)

    @property
    def is_default(self) -> bool:
        return len(self.coeffs) == 1 and self.coeffs[0] == 1.0

    def phi(self, z):
        z = np.asarray(z, dtype=complex)
        out = np.zeros_like(z)
        for ell, t in enumerate(self.coeffs, start=1):
            out = out + t * z ** ell
        return out

    def im_phi(self, z):
        return self.phi(z).imag

    def dphi(self, z):
        z = np.asarray(z, dtype=complex)
        out = np.zeros_like(z)
        for ell, t in enumerate(self.coeffs, start=1):
            out = out + ell * t * z ** (ell - 1)
        return out

    def __eq__(self, other):
        return (isinstance(other, ExternalField)
                and np.array_equal(self.coeffs, other.coeffs))


class _ArcParam:
    """Smooth arclength parametrization of an Arc via cubic splines."""

    def __init__(self, arc: Arc):
        z = arc.samples if len(arc.samples) >= 8 else arc.resampled(
            max(arc.length / 32.0, 1e-12))
        s = np.concatenate([[0.0], np.cumsum(np.abs(np.diff(z)))])
        keep = np.concatenate([[True], np.diff(s) > 0])
        s, z = s[keep], z[keep]
        self.length = float(s[-1])
        self._sx = CubicSpline(s, z.real)
        self._sy = CubicSpline(s, z.imag)

    def point(self, s):
        s = np.asarray(s, dtype=float)
        return self._sx(s) + 1j * self._sy(s)

    def tangent(self, s):
        s = np.asarray(s, dtype=float)
        t = self._sx(s, 1) + 1j * self._sy(s, 1)
        return t / np.abs(t)

    def speed(self, s):
        s = np.asarray(s, dtype=float)
        return np.abs(self._sx(s, 1) + 1j * self._sy(s, 1))


class _Panel:
    """One quadrature panel; tip panels work in the sqrt coordinate."""

    def __init__(self, arc: int, s0: float, s1: float, kind: str,
                 par: _ArcParam, glx: np.ndarray, glw: np.ndarray):
        self.arc = arc
        self.s0 = s0
        self.s1 = s1
        self.kind = kind
        self.xi = glx
        self.glw = glw
        self.bary_w = _bary_weights(glx)
        self.s = self.s_of_xi(glx)
        self.z = par.point(self.s)
        speed = par.speed(self.s)
        self.jac = self.measure_jac_of_xi(glx, speed)
        self.chi = self.chi_of_s(self.s)
        self.chord = abs(self.z[-1] - self.z[0]) + 1e-300

    def s_of_xi(self, xi):
        xi = np.asarray(xi, dtype=float)
        if self.kind == "plain":
            return self.s0 + (self.s1 - self.s0) * (xi + 1.0) / 2.0
        smax = math.sqrt(self.s1 - self.s0)
        if self.kind == "tip-left":
            return self.s0 + (smax * (xi + 1.0) / 2.0) ** 2
        return self.s1 - (smax * (1.0 - xi) / 2.0) ** 2

    def xi_of_s(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "plain":
            return 2.0 * (s - self.s0) / (self.s1 - self.s0) - 1.0
        smax = math.sqrt(self.s1 - self.s0)
        if self.kind == "tip-left":
            return 2.0 * np.sqrt(np.maximum(s - self.s0, 0.0)) / smax - 1.0
        return 1.0 - 2.0 * np.sqrt(np.maximum(self.s1 - s, 0.0)) / smax

    def chi_of_s(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "tip-left":
            return 1.0 / np.sqrt(np.maximum(s - self.s0, 1e-300))
        if self.kind == "tip-right":
            return 1.0 / np.sqrt(np.maximum(self.s1 - s, 1e-300))
        return np.ones_like(s)

    def measure_jac_of_xi(self, xi, speed):
        """d(chi(s) |z'(s)| ds) / dxi evaluated at xi."""
        xi = np.asarray(xi, dtype=float)
        if self.kind == "plain":
            return speed * (self.s1 - self.s0) / 2.0
        smax = math.sqrt(self.s1 - self.s0)
        return speed * smax * np.ones_like(xi)

    def interp_matrix(self, xi_new):
        xi_new = np.asarray(xi_new, dtype=float)
        diff = xi_new[:, None] - self.xi[None, :]
        exact = np.abs(diff) < 1e-14
        diff[exact] = 1.0
        terms = self.bary_w[None, :] / diff
        B = terms / terms.sum(axis=1, keepdims=True)
        rows = exact.any(axis=1)
        if rows.any():
            B[rows] = exact[rows].astype(float)
        return B


def _bary_weights(x):
    w = np.ones_like(x)
    for j in range(len(x)):
        w[j] = 1.0 / np.prod(x[j] - np.delete(x, j))
    return w / np.abs(w).max()


def _dyadic_pieces(a: float, b: float, foot: float, levels: int):
    """Subintervals of [a, b] geometrically refined toward ``foot``."""
    foot = min(max(foot, a), b)
    pieces = []
    if foot - a > 1e-15:
        cuts = [a] + [foot - (foot - a) / 2 ** k for k in range(1, levels)] + [foot]
        pieces += list(zip(cuts[:-1], cuts[1:]))
    if b - foot > 1e-15:
        cuts = [foot] + [foot + (b - foot) / 2 ** k
                         for k in range(levels - 1, 0, -1)] + [b]
        pieces += list(zip(cuts[:-1], cuts[1:]))
    return [(x, y) for (x, y) in pieces if y - x > 1e-15]



def _batched_pieces(pieces, glx, glw):
    """Concatenate Gauss nodes/weights of refined subintervals."""
    xins, wts = [], []
    for (a, b) in pieces:
        xins.append(a + (b - a) * (glx + 1.0) / 2.0)
        wts.append(glw * (b - a) / 2.0)
    return np.concatenate(xins), np.concatenate(wts)


def _panel_layout(L: float, tip_a: bool, tip_b: bool, junction_a: bool,
                  junction_b: bool, n_panels: int):
    tip_frac = 0.3
    a0 = tip_frac * L if tip_a else 0.0
    b0 = L - tip_frac * L if tip_b else L
    if b0 <= a0:
        a0, b0 = (0.45 * L if tip_a else 0.0), (0.55 * L if tip_b else L)
    n_inner = max(1, n_panels - int(tip_a) - int(tip_b))
    breaks = set(np.linspace(a0, b0, n_inner + 1).tolist())
    breaks.update([0.0, L] if (tip_a or tip_b) else [])
    breaks.update([0.0, L])
    breaks = sorted(breaks)
    extra = []
    if junction_a and not tip_a:
        first = breaks[1]
        extra += [first / 4.0, first / 16.0]
    if junction_b and not tip_b:
        last = breaks[-2]
        extra += [L - (L - last) / 4.0, L - (L - last) / 16.0]
    return sorted(set(breaks).union(extra))


def _arc_endpoint_roles(K: PolyContinuum):
    """'tip' (free/anchor end), 'junction' (shared end) or 'ground'."""
    endpoints = []
    for a in K.arcs:
        endpoints += [a.samples[0], a.samples[-1]]
    endpoints = np.asarray(endpoints, dtype=complex)
    roles = []
    for a in K.arcs:
        role = []
        for z in (a.samples[0], a.samples[-1]):
            if z.imag < 1e-7:
                role.append("ground")
            elif (np.abs(endpoints - z) < 1e-7).sum() > 1:
                role.append("junction")
            else:
                role.append("tip")
        roles.append(tuple(role))
    return roles


def _log_kernel(z, w):
    return np.log(np.abs(z - np.conj(w))) - np.log(np.abs(z - w))


class EquilibriumMeasure:
    """Discretized equilibrium measure u(z)|dz| on a poly-continuum.

    Nodes/weights satisfy  sum f(z_k) u_k W_k  ~  int f u |dz|  for smooth f,
    with the singular tip factor folded into the rule.
    """

    def __init__(self, support, field_, params, panels, psi, diagnostics):
        self.support = support
        self.field = field_
        self._params = params
        self.panels = panels
        self.psi = psi
        self.diagnostics = diagnostics
        self._slices = _panel_slices(panels)
        self.nodes = np.concatenate([p.z for p in panels])
        self.density = np.concatenate(
            [psi[sl] * p.chi for p, sl in zip(panels, self._slices)])
        self.weights = np.concatenate([p.glw * p.jac / p.chi for p in panels])
        self.arc_index = np.concatenate(
            [np.full(len(p.z), p.arc) for p in panels])
        self.arclength = np.concatenate([p.s for p in panels])
        self.panel_scale = max(p.chord for p in panels)
        self._fine = None

    # -- moments -------------------------------------------------------------

    def mass(self) -> float:
        return float(np.sum(self.density * self.weights))

    def moment(self, f) -> float:
        return float(np.sum(f(self.nodes) * self.density * self.weights))

    def intensity_measure(self) -> float:
        return 2.0 * self.moment(lambda z: z.imag)

    # -- fine nodal rule (oversampled, for mid-range field evaluation) --------

    def _fine_rule(self, nsub: int = 4):
        if self._fine is None:
            self._fine = {}
        if nsub in self._fine:
            return self._fine[nsub]
        glx, glw = pathint.gauss_legendre(12)
        zs, uw = [], []
        for p, sl in zip(self.panels, self._slices):
            par = self._params[p.arc]
            for k in range(nsub):
                a = -1.0 + 2.0 * k / nsub
                b = -1.0 + 2.0 * (k + 1) / nsub
                xin = a + (b - a) * (glx + 1.0) / 2.0
                ss = p.s_of_xi(xin)
                zz = par.point(ss)
                jac = p.measure_jac_of_xi(xin, par.speed(ss)) * (b - a) / 2.0
                psi_here = p.interp_matrix(xin) @ self.psi[sl]
                zs.append(zz)
                uw.append(psi_here * jac * glw)
        self._fine[nsub] = (np.concatenate(zs), np.concatenate(uw))
        return self._fine[nsub]

    # -- potential / field evaluation -----------------------------------------

    def _nodal(self, kernel, z, fine: bool = False, nsub: int = 4):
        if fine:
            w, uw = self._fine_rule(nsub)
        else:
            w, uw = self.nodes, self.density * self.weights
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        out = np.zeros(z.shape, dtype=complex)
        chunk = max(1, 4_000_000 // max(len(w), 1))
        for i0 in range(0, len(z), chunk):
            zz = z[i0:i0 + chunk, None]
            out[i0:i0 + chunk] = np.sum(kernel(zz, w[None, :]) * uw[None, :], axis=1)
        return out

    def _refined_row(self, kernel, z, levels: int = 17):
        """Per-point product integration with dyadic refinement near z."""
        total = 0.0 + 0.0j
        glx, glw = pathint.gauss_legendre(12)
        for p, sl in zip(self.panels, self._slices):
            par = self._params[p.arc]
            d = np.abs(p.z - z).min()
            if d > 1.0 * p.chord:
                total += np.sum(kernel(z, p.z) * self.psi[sl] * p.glw * p.jac)
                continue
            xi_foot = _foot_xi(p, par, z)
            xin, piece_w = _batched_pieces(
                _dyadic_pieces(-1.0, 1.0, xi_foot, levels), glx, glw)
            ss = p.s_of_xi(xin)
            zz = par.point(ss)
            jac = p.measure_jac_of_xi(xin, par.speed(ss)) * piece_w
            psi_here = p.interp_matrix(xin) @ self.psi[sl]
            total += np.sum(kernel(z, zz) * psi_here * jac)
        return total

    def _eval_auto(self, kernel, z, conj_too: bool = True):
        """Nodal far, fine-nodal mid-range, refined rows close to K."""
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        d = self.support.fast_distance(z)
        if conj_too:
            d = np.minimum(d, self.support.fast_distance(np.conj(z)))
        h = self.panel_scale
        out = np.empty(z.shape, dtype=complex)
        far = d > 0.75 * h
        mid = (~far) & (d > 0.06 * h)
        near = ~(far | mid)
        if far.any():
            out[far] = self._nodal(kernel, z[far])
        if mid.any():
            out[mid] = self._nodal(kernel, z[mid], fine=True)
        for i in np.where(near)[0]:
            out[i] = self._refined_row(kernel, complex(z[i]))
        return out

    def green_potential(self, z) -> np.ndarray:
        """G(z) = int ln|(z - conj w)/(z - w)| d rho(w)."""
        out = self._eval_auto(_log_kernel, z, conj_too=False)
        return np.atleast_1d(out).real

    def g_prime(self, z) -> np.ndarray:
        """g'(z) = i int [1/(z - conj w) - 1/(z - w)] d rho(w) (Schwarz form,
        valid in both half-planes off the support and its reflection)."""
        def kern(a, b):
            return 1j * (1.0 / (a - np.conj(b)) - 1.0 / (a - b))
        return self._eval_auto(kern, z)

    def g_prime_fast(self, z) -> np.ndarray:
        """Tiered nodal-only evaluation of g'; relative accuracy ~1e-3 down
        to distance ~1e-3 diameter from the support, no per-point loops."""
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        d = np.minimum(self.support.fast_distance(z),
                       self.support.fast_distance(np.conj(z)))
        h = self.panel_scale
        out = np.empty(z.shape, dtype=complex)
        tiers = np.full(len(z), 0)
        tiers[d <= 0.5 * h] = 2
        tiers[d <= 0.15 * h] = 4
        tiers[d <= 0.08 * h] = 16
        for t in (0, 2, 4, 16):
            msk = tiers == t
            if not msk.any():
                continue
            if t == 0:
                w, uw = self.nodes, self.density * self.weights
            else:
                w, uw = self._fine_rule(t)
            nu = 2.0 * w.imag * uw
            zz = z[msk, None]
            out[msk] = np.sum(nu[None, :] / ((zz - np.conj(w)[None, :])
                                             * (zz - w[None, :])), axis=1)
        return out

    def density_at(self, arc: int, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = np.zeros_like(s)
        done = np.zeros(s.shape, dtype=bool)
        for p, sl in zip(self.panels, self._slices):
            if p.arc != arc:
                continue
            msk = (~done) & (s >= p.s0 - 1e-14) & (s <= p.s1 + 1e-14)
            if not msk.any():
                continue
            xi = p.xi_of_s(s[msk])
            out[msk] = (p.interp_matrix(xi) @ self.psi[sl]) * p.chi_of_s(s[msk])
            done[msk] = True
        return out

    # -- tangential boundary data ---------------------------------------------

    def cauchy_conj(self, z):
        """int d rho(w) / (z - conj w), near-field safe."""
        def kern(a, b):
            return 1.0 / (a - np.conj(b))
        return self._eval_auto(kern, z, conj_too=True)

    def cauchy_pv(self, arc: int, s: float) -> complex:
        """PV int u(w)|dw| / (z(s) - w) at z(s) on arc ``arc``."""
        par = self._params[arc]
        z_s = complex(par.point(s))
        tau = complex(par.tangent(s))
        u_s = float(self.density_at(arc, s)[0])
        glx, glw = pathint.gauss_legendre(12)
        total = 0.0 + 0.0j
        for p, sl in zip(self.panels, self._slices):
            par_p = self._params[p.arc]
            on_panel = (p.arc == arc) and (p.s0 - 1e-12 <= s <= p.s1 + 1e-12)
            if not on_panel:
                d = np.abs(p.z - z_s).min()
                if d > 1.0 * p.chord:
                    total += np.sum(self.psi[sl] * p.glw * p.jac / (z_s - p.z))
                else:
                    xi_foot = _foot_xi(p, par_p, z_s)
                    for (a, b) in _dyadic_pieces(-1.0, 1.0, xi_foot, 12):
                        xin = a + (b - a) * (glx + 1.0) / 2.0
                        ss = p.s_of_xi(xin)
                        zz = par_p.point(ss)
                        jac = p.measure_jac_of_xi(xin, par_p.speed(ss)) * (b - a) / 2.0
                        psi_here = p.interp_matrix(xin) @ self.psi[sl]
                        total += np.sum(psi_here * jac * glw / (z_s - zz))
                continue
            # panel containing the evaluation point: subtract the local
            # Cauchy model u(s) / (z'(s) (s - t)) and add its PV integral
            xi_foot = float(p.xi_of_s(np.array([s]))[0])
            for (a, b) in _dyadic_pieces(-1.0, 1.0, xi_foot, 17):
                xin = a + (b - a) * (glx + 1.0) / 2.0
                ss = p.s_of_xi(xin)
                zz = par_p.point(ss)
                jac_meas = p.measure_jac_of_xi(xin, par_p.speed(ss)) * (b - a) / 2.0
                chi_here = p.chi_of_s(ss)
                psi_here = p.interp_matrix(xin) @ self.psi[sl]
                uu = psi_here * chi_here
                reg = uu / (z_s - zz) - u_s / (tau * (s - ss))
                jac_plain = jac_meas / chi_here
                total += np.sum(reg * jac_plain * glw)
            total += (u_s / tau) * math.log(
                max(s - p.s0, 1e-300) / max(p.s1 - s, 1e-300))
        return complex(total)

    def normal_data(self, arc: int, s):
        """One-sided normal derivatives of G on the arc from jump relations.

        Returns (dG/dn_plus, dG/dn_minus, dG/dtau, u, du_tilde/ds) where
        n_plus = i * tangent.  The sum rule is dn+ + dn- = -2 pi u; the
        difference follows from the tangential derivative of the averaged
        boundary values of P = Phi - g.
        """
        par = self._params[arc]
        s = float(s)
        z = complex(par.point(s))
        tau = complex(par.tangent(s))
        u = float(self.density_at(arc, s)[0])
        cc = complex(self.cauchy_conj(np.array([z]))[0])
        pv = self.cauchy_pv(arc, s)
        dphi = complex(self.field.dphi(np.array([z]))[0])
        # sum of one-sided P' boundary values: 2 Phi' - (g'_+ + g'_-)
        sumP = 2.0 * dphi - 2j * (cc - pv)
        du_tilde = -0.5 * (tau * sumP).real   # d/ds of -(U_+ + U_-)/2
        mismatch_v = -2.0 * du_tilde          # dV/dn+ - dV/dn-
        sum_v = 2.0 * math.pi * u             # dV/dn+ + dV/dn-
        dvp = 0.5 * (sum_v + mismatch_v)
        dvm = 0.5 * (sum_v - mismatch_v)
        im_nphi_p = (dphi * 1j * tau).imag    # d(Im Phi)/dn_plus
        dgp = im_nphi_p - dvp
        dgm = -im_nphi_p - dvm
        dgt = (dphi * tau).imag
        return dgp, dgm, dgt, u, du_tilde

    def boundary_residual(self, n_check_per_panel: int = 3) -> float:
        """Sup |A u - Im Phi| at points strictly between collocation nodes."""
        worst = 0.0
        for p in self.panels:
            par = self._params[p.arc]
            mids = 0.5 * (p.xi[:-1] + p.xi[1:])
            take = np.linspace(0, len(mids) - 1, n_check_per_panel).astype(int)
            for xi in mids[take]:
                s = float(p.s_of_xi(np.array([xi]))[0])
                z = complex(par.point(s))
                val = self._refined_row(_log_kernel, z).real
                worst = max(worst, abs(val - float(self.field.im_phi(z))))
        return worst



def _foot_xi(panel: _Panel, par: _ArcParam, z: complex) -> float:
    """xi of the point of the panel closest to z (scan plus golden polish)."""
    xi_dense = np.linspace(-1.0, 1.0, 65)
    zd = par.point(panel.s_of_xi(xi_dense))
    k = int(np.abs(zd - z).argmin())
    lo = xi_dense[max(k - 1, 0)]
    hi = xi_dense[min(k + 1, len(xi_dense) - 1)]
    gr = 0.5 * (math.sqrt(5.0) - 1.0)
    a, b = lo, hi
    c, d = b - gr * (b - a), a + gr * (b - a)
    fc = abs(complex(par.point(panel.s_of_xi(np.array([c]))[0])) - z)
    fd = abs(complex(par.point(panel.s_of_xi(np.array([d]))[0])) - z)
    for _ in range(40):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - gr * (b - a)
            fc = abs(complex(par.point(panel.s_of_xi(np.array([c]))[0])) - z)
        else:
            a, c, fc = c, d, fd
            d = a + gr * (b - a)
            fd = abs(complex(par.point(panel.s_of_xi(np.array([d]))[0])) - z)
        if b - a < 1e-12:
            break
    return float(0.5 * (a + b))


def _panel_slices(panels):
    out, k = [], 0
    for p in panels:
        out.append(slice(k, k + len(p.z)))
        k += len(p.z)
    return out


def solve_equilibrium(K: PolyContinuum, field: ExternalField | None = None,
                      nodes_per_panel: int = 10, n_panels: int = 5,
                      strict: bool = True, refine_levels: int = 17) -> EquilibriumMeasure:
    """Solve the log-kernel equation for the equilibrium density on ``K``.

    With the default field the density is positive on the exterior boundary;
    for general fields a signed solution is legal and only flagged.  The
    collocation matrix condition estimate is recorded and raises
    IllConditioned above COND_THRESHOLD unless ``strict=False``.
    """
    field = field or ExternalField()
    params = [_ArcParam(a) for a in K.arcs]
    roles = _arc_endpoint_roles(K)
    glx, glw = pathint.gauss_legendre(nodes_per_panel)

    panels: list[_Panel] = []
    for ai, (par, role) in enumerate(zip(params, roles)):
        tip_a, tip_b = role[0] == "tip", role[1] == "tip"
        br = _panel_layout(par.length, tip_a, tip_b,
                           role[0] == "junction", role[1] == "junction", n_panels)
        for s0, s1 in zip(br[:-1], br[1:]):
            kind = "plain"
            if tip_a and s0 == br[0]:
                kind = "tip-left"
            elif tip_b and s1 == br[-1]:
                kind = "tip-right"
            panels.append(_Panel(ai, s0, s1, kind, par, glx, glw))

    slices = _panel_slices(panels)
    n = slices[-1].stop
    zs = np.concatenate([p.z for p in panels])
    glx12, glw12 = pathint.gauss_legendre(12)

    A = np.zeros((n, n))
    for pj, slj in zip(panels, slices):
        parj = params[pj.arc]
        dists = np.min(np.abs(zs[:, None] - pj.z[None, :]), axis=1)
        far = dists > 1.2 * pj.chord
        if far.any():
            Kmat = _log_kernel(zs[far, None], pj.z[None, :])
            A[np.ix_(far, range(slj.start, slj.stop))] += \
                Kmat * (pj.glw * pj.jac)[None, :]
        near_ix = np.where(~far)[0]
        if len(near_ix) == 0:
            continue
        arc_of_row = np.concatenate([np.full(len(p.z), p.arc) for p in panels])
        s_of_row = np.concatenate([p.s for p in panels])
        for i in near_ix:
            zi = zs[i]
            if arc_of_row[i] == pj.arc:
                xi_foot = float(pj.xi_of_s(
                    np.array([min(max(s_of_row[i], pj.s0), pj.s1)]))[0])
            else:
                xi_foot = _foot_xi(pj, parj, complex(zi))
            row = np.zeros(len(pj.xi))
            for (a, b) in _dyadic_pieces(-1.0, 1.0, xi_foot, 17):
                xin = a + (b - a) * (glx12 + 1.0) / 2.0
                ss = pj.s_of_xi(xin)
                zz = parj.point(ss)
                jac = pj.measure_jac_of_xi(xin, parj.speed(ss)) * (b - a) / 2.0
                row += (_log_kernel(zi, zz) * jac * glw12) @ pj.interp_matrix(xin)
            A[i, slj] += row

    b = field.im_phi(zs)
    cond = float(np.linalg.cond(A))
    diagnostics = {"condition": cond, "n_unknowns": n, "n_panels": len(panels)}
    if cond > COND_THRESHOLD and strict:
        raise IllConditioned(cond, COND_THRESHOLD)
    psi = np.linalg.solve(A, b)

    m = EquilibriumMeasure(K, field, params, panels, psi, diagnostics)
    neg = float(m.density.min())
    diagnostics["min_density"] = neg
    if field.is_default and neg < -1e-6 * max(1.0, float(np.abs(m.density).max())):
        diagnostics["negative_density"] = True
        if strict:
            raise NegativeDensity(f"min density {neg:.3e} with the default field")
    elif not field.is_default and neg < 0:
        diagnostics["signed_measure"] = True
    return m


# -- quasimomentum field -------------------------------------------------------


class QuasimomentumField:
    """Analytic completion z -> Phi(z) - g(z) of the solved potential."""

    def __init__(self, measure: EquilibriumMeasure):
        self.measure = measure
        self.field = measure.field

    def _guard(self, z):
        d = self.measure.support.distance_to(z)
        if np.any(d < 1e-8 * max(1.0, self.measure.support.diameter)):
            raise EvaluationOnSupport(
                "use boundary-value routines on the support itself")

    def P(self, z):
        """Phi(z) - g(z) with principal logs per node; multivalued branches
        can be crossed below floating components, so callers pick safe
        points (tests use points separated from vertical shadows)."""
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        self._guard(z)
        m = self.measure
        uw = m.density * m.weights
        w = m.nodes
        gz = 1j * np.sum(np.log((z[:, None] - np.conj(w)[None, :])
                                / (z[:, None] - w[None, :])) * uw[None, :], axis=1)
        return self.field.phi(z) - gz

    def dP(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        self._guard(z)
        return self.field.dphi(z) - self.measure.g_prime(z)

    def dP_fast(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        return self.field.dphi(z) - self.measure.g_prime_fast(z)

    def d2P(self, z, h: float | None = None):
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        h = h or 1e-6 * max(1.0, self.measure.support.diameter)
        return (self.dP_fast(z + h) - self.dP_fast(z - h)) / (2.0 * h)

    def imP(self, z):
        """Im P = Im Phi - G (single valued, >= 0 off the support)."""
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        return self.field.im_phi(z) - self.measure.green_potential(z)


def quasimomentum(m: EquilibriumMeasure) -> QuasimomentumField:
    return QuasimomentumField(m)


def residue_intensity_field(m: EquilibriumMeasure,
                            field: ExternalField | None = None,
                            n_samples: int = 512) -> float:
    """(1/2 pi i) oint Phi(z) g'(z) dz on a far circle; equals the 1/z
    coefficient of P for the default field, and the weighted intensity
    for polynomial fields."""
    field = field or m.field
    R = 4.0 * max(1.0, float(np.abs(m.nodes).max()))
    th = 2.0 * np.pi * np.arange(n_samples) / n_samples
    z = R * np.exp(1j * th)
    gp = m.g_prime(z)
    dz = 1j * z * (2.0 * np.pi / n_samples)
    val = np.sum(field.phi(z) * gp * dz) / (2j * np.pi)
    return float(val.real)


def dirichlet_intensity(m: EquilibriumMeasure, grid_res: int = 512,
                        r_factor: float = 20.0) -> tuple[float, dict]:
    """(1/pi) iint |grad G|^2 over the truncated exterior on a polar-graded
    grid, with per-cell boundary-limit values replacing the thin excluded
    band along the support and an I^2/(2 R^2) far tail.
    """
    K = m.support
    allz = K.all_samples()
    diam = max(K.diameter, 1e-9)
    cx = 0.5 * (allz.real.min() + allz.real.max())
    R = r_factor * diam
    r_in = 3e-3 * diam
    nr = ntheta = grid_res

    radii = r_in * (R / r_in) ** np.linspace(0.0, 1.0, nr + 1)
    rmid = np.sqrt(radii[:-1] * radii[1:])
    dtheta = np.pi / ntheta
    theta = np.pi * (np.arange(ntheta) + 0.5) / ntheta
    area_ring = 0.5 * (radii[1:] ** 2 - radii[:-1] ** 2) * dtheta
    cell_diag = np.sqrt(np.diff(radii) ** 2 + (rmid * dtheta) ** 2)

    r_k = np.abs(allz - cx)
    near_r = (rmid > 0.25 * max(float(r_k.min()), r_in)) \
        & (rmid < 2.5 * float(r_k.max()))
    d_band = (1.6 / 8.0) * float(cell_diag[near_r].max()) if near_r.any() else 0.0
    spacing = max(d_band / 4.0, 1e-4 * diam)

    # dense boundary tables: points, normals and one-sided |grad G|^2
    bd_pts, bd_nrm, bd_val_p, bd_val_m = [], [], [], []
    for ai in range(len(K.arcs)):
        par = m._params[ai]
        L = par.length
        ss = np.linspace(0.004 * L, 0.996 * L, 49)
        for s in ss:
            dgp, dgm, dgt, _, _ = m.normal_data(ai, float(s))
            bd_pts.append(complex(par.point(s)))
            bd_nrm.append(1j * complex(par.tangent(s)))
            bd_val_p.append(dgp ** 2 + dgt ** 2)
            bd_val_m.append(dgm ** 2 + dgt ** 2)
    bd_pts = np.asarray(bd_pts)
    bd_nrm = np.asarray(bd_nrm)
    bd_val = np.column_stack([bd_val_p, bd_val_m])
    from scipy.spatial import cKDTree
    bd_tree = cKDTree(np.column_stack([bd_pts.real, bd_pts.imag]))

    # singular tips: local model |grad G|^2 ~ (pi c)^2 / dist with the
    # density coefficient c from the tip panel's smooth part
    tips = []
    for p, sl in zip(m.panels, m._slices):
        if p.kind == "tip-left":
            z_t = complex(m._params[p.arc].point(p.s0))
            c_t = float(p.interp_matrix(np.array([-1.0])) @ m.psi[sl])
            tips.append((z_t, (np.pi * c_t) ** 2))
        elif p.kind == "tip-right":
            z_t = complex(m._params[p.arc].point(p.s1))
            c_t = float(p.interp_matrix(np.array([1.0])) @ m.psi[sl])
            tips.append((z_t, (np.pi * c_t) ** 2))

    # combined kernel: i [1/(z-conj w) - 1/(z-w)] = 2 Im(w) / ((z-conj w)(z-w));
    # rules are (points, -2 Im(w) uw) pairs, cheapest valid tier per distance
    def _rule(nsub):
        if nsub == 0:
            w, uw = m.nodes, m.density * m.weights
        else:
            w, uw = m._fine_rule(nsub)
        return w, 2.0 * w.imag * uw

    rules = {k: _rule(k) for k in (0, 2, 4, 16)}

    def _gp_tier(zpts, tier):
        w, nu = rules[tier]
        out = np.empty(len(zpts), dtype=complex)
        chunk = max(1, 6_000_000 // len(w))
        for i0 in range(0, len(zpts), chunk):
            zz = zpts[i0:i0 + chunk, None]
            out[i0:i0 + chunk] = np.sum(
                nu[None, :] / ((zz - np.conj(w)[None, :]) * (zz - w[None, :])),
                axis=1)
        return out

    def gradsq(zpts):
        """|g'|^2 with tiered nodal rules selected by distance to K."""
        out = np.empty(len(zpts))
        d = K.fast_distance(zpts, spacing)
        h = m.panel_scale
        tiers = np.full(len(zpts), 0)
        tiers[d <= 0.5 * h] = 2
        tiers[d <= 0.15 * h] = 4
        tiers[d <= 0.08 * h] = 16
        for t in (0, 2, 4, 16):
            msk = tiers == t
            if msk.any():
                out[msk] = np.abs(_gp_tier(zpts[msk], t)) ** 2
        return out

    def boundary_limit(zpts):
        _, idx = bd_tree.query(np.column_stack([zpts.real, zpts.imag]))
        side = ((zpts - bd_pts[idx]) * np.conj(bd_nrm[idx])).real <= 0.0
        vals = bd_val[idx, side.astype(int)]
        for z_t, amp in tips:
            d_t = np.abs(zpts - z_t)
            close = d_t < 4.0 * d_band
            if close.any():
                vals[close] = amp / np.maximum(d_t[close], 0.25 * d_band)
        return vals

    cells_z = (cx + rmid[:, None] * np.exp(1j * theta)[None, :]).ravel()
    cells_area = np.repeat(area_ring, ntheta)
    cells_diag = np.repeat(cell_diag, ntheta)
    d_cells = K.fast_distance(cells_z, spacing)
    outer = d_cells > 3.0 * cells_diag + d_band

    total = float(np.sum(gradsq(cells_z[outer]) * cells_area[outer]))

    # near cells smaller than the band need no subdivision: classify whole
    near_all = np.where(~outer)[0]
    excluded_area = 0.0
    tiny = near_all[cells_diag[near_all] < d_band / 3.0]
    if len(tiny):
        keep_t = d_cells[tiny] > d_band
        if keep_t.any():
            ix = tiny[keep_t]
            total += float(np.sum(gradsq(cells_z[ix]) * cells_area[ix]))
        if (~keep_t).any():
            ix = tiny[~keep_t]
            total += float(np.sum(boundary_limit(cells_z[ix]) * cells_area[ix]))
            excluded_area += float(np.sum(cells_area[ix]))
    near_ix = near_all[cells_diag[near_all] >= d_band / 3.0]
    if len(near_ix):
        jr = near_ix // ntheta
        jt = near_ix % ntheta
        etas = (np.arange(8) + 0.5) / 8.0
        sub_r = radii[jr][:, None] + np.diff(radii)[jr][:, None] * etas[None, :]
        sub_t = (theta[jt][:, None] - dtheta / 2.0) + dtheta * etas[None, :]
        zz = (cx + sub_r[:, :, None] * np.exp(1j * sub_t[:, None, :])).reshape(len(near_ix), -1).ravel()
        sub_area = np.repeat(cells_area[near_ix] / 64.0, 64)
        dd = K.fast_distance(zz, spacing)
        keep = dd > d_band
        vals = np.empty(len(zz))
        if keep.any():
            vals[keep] = gradsq(zz[keep])
        if (~keep).any():
            vals[~keep] = boundary_limit(zz[~keep])
            excluded_area = float(np.sum(sub_area[~keep]))
        total += float(np.sum(vals * sub_area))

    I_est = m.intensity_measure()
    tail = I_est ** 2 / (2.0 * R ** 2)
    value = total / np.pi + tail
    info = {"grid_total": total / np.pi, "tail_correction": tail,
            "excluded_area": excluded_area, "band_halfwidth": d_band,
            "value": value}
    return value, info


@dataclass
class EnergyReport:
    I_measure: float
    I_residue: float
    I_dirichlet: float
    residual_rm: float
    residual_md: float
    bc_residual: float
    condition: float
    n_nodes: int
    I_phi: float | None = None
    grid_info: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "I_measure": self.I_measure, "I_residue": self.I_residue,
            "I_dirichlet": self.I_dirichlet,
            "residual_residue_measure": self.residual_rm,
            "residual_measure_dirichlet": self.residual_md,
            "bc_residual": self.bc_residual, "condition": self.condition,
            "n_nodes": self.n_nodes, "I_phi": self.I_phi,
        }


def intensity_report(m: EquilibriumMeasure, grid_res: int = 512,
                     dirichlet_tol: float = 5e-2,
                     strict: bool = False) -> EnergyReport:
    """Intensity by measure moment, far-field residue and Dirichlet grid."""
    i_meas = m.intensity_measure()
    i_res = residue_intensity_field(m)
    i_dir, info = dirichlet_intensity(m, grid_res=grid_res)
    rep = EnergyReport(
        I_measure=i_meas, I_residue=i_res, I_dirichlet=i_dir,
        residual_rm=abs(i_res - i_meas), residual_md=abs(i_meas - i_dir),
        bc_residual=m.boundary_residual(),
        condition=m.diagnostics["condition"], n_nodes=len(m.nodes),
        grid_info=info)
    if strict and i_meas > 1e-12 and rep.residual_md > dirichlet_tol * max(1.0, i_meas):
        raise GridTooCoarse(f"Dirichlet grid disagrees by {rep.residual_md:.3e}")
    return rep


def intensity_phi(m: EquilibriumMeasure, field: ExternalField) -> float:
    """2 int Im Phi(w) d rho(w), cross-checked against the far residue."""
    if m.field != field:
        raise FieldMismatch("measure was solved against a different field")
    val = 2.0 * float(np.sum(field.im_phi(m.nodes) * m.density * m.weights))
    res = residue_intensity_field(m, field)
    if abs(val - res) > 1e-4 * max(1.0, abs(val)):
        raise FieldMismatch(
            f"moment {val:.6e} and residue {res:.6e} forms disagree")
    return val


@dataclass
class StagnationSet:
    points: list
    multiplicities: list

    @property
    def total(self) -> int:
        return int(sum(self.multiplicities))


def stagnation_points(f: QuasimomentumField, expected: int | None = None,
                      strict: bool = True) -> StagnationSet:
    """Zeros of P' in the upper half-plane off the support.

    Argument-principle counting on a recursively subdivided box cover,
    Newton polish on isolated zeros.  ``expected`` defaults to the number
    of floating components; a disagreement raises CountMismatch.
    """
    m = f.measure
    K = m.support
    if expected is None:
        expected = K.n_floating
    allz = K.all_samples()
    diam = max(K.diameter, 1.0)
    x0, x1 = allz.real.min() - 0.613 * diam, allz.real.max() + 0.587 * diam
    y0, y1 = 1e-4 * diam, allz.imag.max() + 0.577 * diam
    margin = 5e-3 * diam
    found = []
    k_dense = np.concatenate([a.resampled(margin) for a in K.arcs])

    def winding(xa, xb, ya, yb, n):
        zs = np.concatenate([
            xa + (xb - xa) * np.linspace(0, 1, n, endpoint=False) + 1j * ya,
            xb + 1j * (ya + (yb - ya) * np.linspace(0, 1, n, endpoint=False)),
            xb - (xb - xa) * np.linspace(0, 1, n, endpoint=False) + 1j * yb,
            xa + 1j * (yb - (yb - ya) * np.linspace(0, 1, n, endpoint=False)),
        ])
        if K.fast_distance(zs).min() < 0.5 * margin:
            return "near_support"
        vals = f.dP_fast(zs)
        if np.abs(vals).min() < 1e-10:
            return "resample"
        dphi = np.angle(vals[np.r_[1:len(vals), 0]] / vals)
        if np.abs(dphi).max() > 2.0:
            return "resample"
        return int(round(float(dphi.sum()) / (2 * np.pi)))

    # irrational split fractions keep symmetric zeros off box edges
    FX, FY = 0.5137, 0.4863

    def contains_support(xa, xb, ya, yb):
        return bool(np.any((k_dense.real > xa - 0.5 * margin)
                           & (k_dense.real < xb + 0.5 * margin)
                           & (k_dense.imag > ya - 0.5 * margin)
                           & (k_dense.imag < yb + 0.5 * margin)))

    def recurse(xa, xb, ya, yb, depth):
        if contains_support(xa, xb, ya, yb):
            if max(xb - xa, yb - ya) < 2 * margin:
                return
            xm = xa + FX * (xb - xa)
            ym = ya + FY * (yb - ya)
            for (a, b, c, d) in ((xa, xm, ya, ym), (xm, xb, ya, ym),
                                 (xa, xm, ym, yb), (xm, xb, ym, yb)):
                recurse(a, b, c, d, depth + 1)
            return
        w = winding(xa, xb, ya, yb, 48)
        if w == "resample":
            for n in (96, 192):
                w = winding(xa, xb, ya, yb, n)
                if not isinstance(w, str):
                    break
        if isinstance(w, str):
            if max(xb - xa, yb - ya) < 2 * margin:
                return
            xm = xa + FX * (xb - xa)
            ym = ya + FY * (yb - ya)
            for (a, b, c, d) in ((xa, xm, ya, ym), (xm, xb, ya, ym),
                                 (xa, xm, ym, yb), (xm, xb, ym, yb)):
                recurse(a, b, c, d, depth + 1)
            return
        if w == 0:
            return
        if max(xb - xa, yb - ya) < 1e-3 * diam or depth > 22:
            z0 = complex(xa + FX * (xb - xa), ya + FY * (yb - ya))
            for _ in range(60):
                dp = f.dP_fast(np.array([z0]))[0]
                d2 = f.d2P(np.array([z0]))[0]
                if abs(d2) < 1e-300:
                    break
                step = dp / d2
                z0 = z0 - step
                if abs(step) < 1e-13 * diam:
                    break
            found.append((complex(z0), int(w)))
            return
        xm = xa + FX * (xb - xa)
        ym = ya + FY * (yb - ya)
        for (a, b, c, d) in ((xa, xm, ya, ym), (xm, xb, ya, ym),
                             (xa, xm, ym, yb), (xm, xb, ym, yb)):
            recurse(a, b, c, d, depth + 1)

    recurse(x0, x1, y0, y1, 0)
    # merge duplicates found by sibling boxes
    merged = []
    for p, w in found:
        for k, (q, wq) in enumerate(merged):
            if abs(p - q) < 1e-6 * diam:
                break
        else:
            merged.append((p, w))
    pts = [p for p, _ in merged]
    mults = [w for _, w in merged]
    total = int(sum(mults))
    if strict and total != expected:
        raise CountMismatch(f"found {total} stagnation points, expected {expected}")
    return StagnationSet(pts, mults)
