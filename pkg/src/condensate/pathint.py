"""Branch-continued evaluation and quadrature of sqrt(Q) along paths.

The square root of a rational quadratic differential lives on a two-sheeted
cover; all routines here track the sheet by nearest-sign continuation, valid
as long as consecutive evaluation points stay inside the half-turn monodromy
radius of the nearest branch point.  Every straight segment is pre-subdivided
against the supplied branch-point list to guarantee that.
"""

from __future__ import annotations

import numpy as np

from .errors import BranchJump, QuadratureFailure

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_legendre(n: int):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def continue_branch(values, w_start: complex, scale_hint: float = 0.0) -> np.ndarray:
    """Flip principal square roots onto the sheet selected by ``w_start``.

    Raises BranchJump when the nearest-sign choice is ambiguous, i.e. the
    two candidates are comparably far from the previous value at a magnitude
    that matters on the path; ``scale_hint`` tells the check how large the
    values are elsewhere on the same path so dips through (even) zeros of Q
    do not trip it.
    """
    out = np.array(np.atleast_1d(values), dtype=complex)
    prev = complex(w_start)
    running_max = max(abs(prev), scale_hint, 1e-300)
    for k in range(len(out)):
        d_keep = abs(out[k] - prev)
        d_flip = abs(out[k] + prev)
        if d_flip < d_keep:
            out[k] = -out[k]
            d_keep = d_flip
        scale = abs(out[k]) + abs(prev)
        running_max = max(running_max, abs(out[k]))
        # ambiguity matters only at magnitudes that contribute to integrals;
        # passing through an (even) zero of Q legitimately dips to ~0
        if d_keep > 0.75 * scale and abs(out[k]) > 1e-3 * running_max:
            raise BranchJump("square-root continuation ambiguous (step too large)")
        prev = out[k]
    return out


def _subdivide_against(z0: complex, z1: complex, branch_points: np.ndarray,
                       safety: float) -> np.ndarray:
    """Breakpoints of [z0, z1] so each piece is short next to branch points."""
    out = [z0]
    stack = [(z0, z1)]
    while stack:
        a, b = stack.pop()
        mid = 0.5 * (a + b)
        if len(branch_points):
            d = min(np.abs(branch_points - a).min(),
                    np.abs(branch_points - b).min(),
                    np.abs(branch_points - mid).min())
        else:
            d = np.inf
        if abs(b - a) > safety * d and abs(b - a) > 1e-13 * (1 + abs(a) + abs(b)):
            stack.append((mid, b))
            stack.append((a, mid))
        else:
            out.append(b)
    return np.array(out)


def integrate_sqrt_segment(Q, z0: complex, z1: complex, w_start: complex,
                           branch_points: np.ndarray, tol: float,
                           safety: float = 0.25):
    """Integral of sqrt(Q) dz over [z0, z1] with the branch of ``w_start``.

    Returns ``(integral, w_end)``.  Order doubling on each sub-piece until
    two consecutive estimates agree to ``tol``.
    """
    breaks = _subdivide_against(z0, z1, branch_points, safety)
    total = 0.0 + 0.0j
    w_prev = complex(w_start)
    for a, b in zip(breaks[:-1], breaks[1:]):
        prev_est = None
        for n in (8, 16, 32, 64):
            x, wts = gauss_legendre(n)
            zs = a + (b - a) * 0.5 * (x + 1.0)
            ws = continue_branch(np.sqrt(Q(zs)), w_prev)
            cur = 0.5 * (b - a) * np.sum(wts * ws)
            if prev_est is not None and abs(cur - prev_est) <= max(tol, 1e-15 * abs(cur)):
                break
            prev_est = cur
        else:
            if abs(cur - prev_est) > 100.0 * max(tol, 1e-15 * abs(cur)):
                raise QuadratureFailure("segment quadrature did not settle")
        total += cur
        w_prev = continue_branch(np.sqrt(Q(np.array([b]))), ws[-1],
                                 scale_hint=float(np.abs(ws).max()))[0]
    return total, w_prev


def integrate_sqrt_path(Q, points, w_start: complex, branch_points,
                        tol: float = 1e-13, safety: float = 0.25):
    """Integral of sqrt(Q) dz along the polyline ``points`` with continuation."""
    branch_points = np.asarray(np.atleast_1d(branch_points), dtype=complex)
    total = 0.0 + 0.0j
    w = complex(w_start)
    for z0, z1 in zip(points[:-1], points[1:]):
        val, w = integrate_sqrt_segment(Q, complex(z0), complex(z1), w,
                                        branch_points, tol, safety)
        total += val
    return total, w


def integrate_sqrt_loop(Q, points, branch_points, tol: float = 1e-13):
    """Period of sqrt(Q) dz around a closed polyline.

    The loop must enclose an even number of branch points so the branch
    closes up; that is verified and BranchJump raised otherwise.
    """
    z0 = complex(points[0])
    w0 = complex(np.sqrt(Q(np.array([z0])))[0])
    total, w_end = integrate_sqrt_path(Q, points, w0, branch_points, tol)
    if abs(w_end - w0) > 1e-6 * (1.0 + abs(w0)):
        raise BranchJump("branch did not close up around the loop")
    return total


def rectangle_loop(center_x: float, half_width: float, half_height: float) -> np.ndarray:
    """Counterclockwise rectangle around the vertical segment at ``center_x``."""
    c = center_x
    return np.array([c - half_width - 1j * half_height,
                     c + half_width - 1j * half_height,
                     c + half_width + 1j * half_height,
                     c - half_width + 1j * half_height,
                     c - half_width - 1j * half_height], dtype=complex)


def integrate_sqrt_from_branch_point(Q, b: complex, z1: complex,
                                     tol: float = 1e-13, sign: float = 1.0):
    """Integral of sqrt(Q) dz from the branch point ``b`` straight to ``z1``.

    Regularized by the substitution z = b + w^2, in which the integrand
    2 w sqrt(Q(b + w^2)) is analytic through w = 0 for simple poles and
    odd-order zeros alike.  ``sign`` selects the sheet leaving ``b``.
    Returns ``(integral, w_at_z1)`` with ``w_at_z1`` the branch of sqrt(Q).
    """
    dw_end = np.sqrt(complex(z1) - complex(b))
    prev_est, cur, vals, ws = None, 0.0 + 0.0j, None, None
    for n in (24, 48, 96, 192):
        x, wts = gauss_legendre(n)
        ws = dw_end * 0.5 * (x + 1.0)
        vals = np.sqrt(Q(b + ws ** 2))
        vals = continue_branch(vals, sign * vals[0])
        cur = 0.5 * dw_end * np.sum(wts * 2.0 * ws * vals)
        if prev_est is not None and abs(cur - prev_est) <= max(tol, 1e-14 * abs(cur)):
            break
        prev_est = cur
    w_end = continue_branch(np.sqrt(Q(np.array([complex(z1)]))), vals[-1],
                            scale_hint=float(np.abs(vals).max()))[0]
    return cur, w_end


def integrate_sqrt_between(Q, b0: complex, b1: complex, branch_points,
                           waypoints=None, tol: float = 1e-13):
    """Half-period chain: integral of sqrt(Q) dz from branch point b0 to b1.

    Value is branch-dependent up to overall sign, which is all the callers
    (reality diagnostics) need.
    """
    branch_points = np.asarray(np.atleast_1d(branch_points), dtype=complex)
    others = branch_points[(np.abs(branch_points - b0) > 1e-14)
                           & (np.abs(branch_points - b1) > 1e-14)]
    gap = abs(b1 - b0)
    if len(others):
        leg = 0.25 * min(gap, np.abs(others - b0).min(), np.abs(others - b1).min())
    else:
        leg = 0.25 * gap
    direction = (b1 - b0) / gap
    z_a = b0 + leg * direction
    z_b = b1 - leg * direction
    i0, w_a = integrate_sqrt_from_branch_point(Q, b0, z_a, tol)
    mids = np.array([z_a] + (list(waypoints) if waypoints else []) + [z_b],
                    dtype=complex)
    i_mid, w_b = integrate_sqrt_path(Q, mids, w_a, others, tol)
    i1, w1 = integrate_sqrt_from_branch_point(Q, b1, z_b, tol)
    if abs(w1 - w_b) <= abs(w1 + w_b):
        return i0 + i_mid - i1
    return i0 + i_mid + i1
