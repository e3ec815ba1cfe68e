"""Batch front-end: solve, trace, verify, and compare pipelines.

Every command reads a JSON job configuration (plus flag overrides), writes
its artifacts under the job directory, and finishes with a manifest that
embeds the tolerance set and solver diagnostics.  Exit codes: 0 all checks
within tolerance, 1 error, 2 completed with degeneracy flags.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import boutroux as bx
from . import equilibrium as eqm
from . import serialize as ser
from . import svg as svgmod
from . import tracer as tr
from . import verify as vf
from .errors import CondensateError, ConfigError
from .geom import AnchorSet, ConnectivityMatrix, PolyContinuum, connectivity_of, hausdorff_distance


def _merge_flags(cfg, out, tolerances, samples, seed, grid_res):
    cfg = dict(cfg)
    tol = dict(cfg.get("tolerances", {}))
    for k, v in tolerances.items():
        if v is not None:
            tol[k] = v
    cfg["tolerances"] = tol
    if out:
        cfg["out"] = out
    if samples is not None:
        cfg["samples"] = samples
    if seed is not None:
        cfg["seed"] = seed
    if grid_res is not None:
        cfg["grid_res"] = grid_res
    return ser.validate_config(cfg, source="<merged>")


def _common(f):
    f = click.option("--config", "config_path", type=click.Path(exists=True),
                     default=None, help="JSON job configuration")(f)
    f = click.option("--out", default=None, help="output directory")(f)
    f = click.option("--tol-boutroux", type=float, default=None)(f)
    f = click.option("--tol-bc", type=float, default=None)(f)
    f = click.option("--tol-traj", type=float, default=None)(f)
    f = click.option("--tol-energy", type=float, default=None)(f)
    f = click.option("--samples", type=int, default=None)(f)
    f = click.option("--seed", type=int, default=None)(f)
    f = click.option("--grid-res", type=int, default=None)(f)
    f = click.option("--svg/--no-svg", "want_svg", default=True)(f)
    return f


def _load(config_path, anchors, out, tol_boutroux, tol_bc, tol_traj,
          tol_energy, samples, seed, grid_res):
    if config_path:
        cfg = ser.load_config(config_path)
    else:
        cfg = ser.validate_config({}, source="<flags>")
    if anchors:
        cfg["anchors"] = json.loads(anchors)
        cfg = ser.validate_config(cfg, source="<flags>")
    return _merge_flags(cfg, out,
                        {"tol_boutroux": tol_boutroux, "tol_bc": tol_bc,
                         "tol_traj": tol_traj, "tol_energy": tol_energy},
                        samples, seed, grid_res)


def _finish(outdir, manifest, exit_code):
    manifest["exit_code"] = exit_code
    ser.write_json(Path(outdir) / "manifest.json", manifest)
    sys.exit(exit_code)


@click.group()
def main():
    """Minimal-intensity spectral supports for focusing-NLS condensates."""


@main.command("solve")
@click.option("--anchors", default=None,
              help='JSON anchor list, e.g. "[[0,1]]"')
@click.option("--boutroux-seed", "bseed", default=None,
              help="'naive', 'square', 'tree' or JSON {\"coeffs\": [...]}")
@_common
def cmd_solve(anchors, bseed, config_path, out, tol_boutroux, tol_bc,
              tol_traj, tol_energy, samples, seed, grid_res, want_svg):
    """Real-period solve, spectrum trace, and energy report for an anchor set."""
    t_start = time.time()
    try:
        cfg = _load(config_path, anchors, out, tol_boutroux, tol_bc, tol_traj,
                    tol_energy, samples, seed, grid_res)
        E = ser.anchors_from_config(cfg)
    except (ConfigError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    outdir = Path(cfg.get("out", "job-solve"))
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": "solve", "config": cfg,
                "started": t_start}
    exit_code = 0
    try:
        seed_spec = cfg.get("boutroux_seed", bseed)
        if isinstance(seed_spec, str) and seed_spec.startswith("{"):
            seed_spec = json.loads(seed_spec)
        if isinstance(seed_spec, dict):
            seed_qd = bx.QuadraticDifferential(E, seed_spec["coeffs"])
        else:
            seed_qd = seed_spec
        qd, diag = bx.solve_boutroux(E, seed=seed_qd,
                                     tol=cfg["tolerances"]["tol_boutroux"])
        graph = tr.build_critical_graph(qd, tol_traj=cfg["tolerances"]["tol_traj"])
        tr.check_valences(graph)
        tr.check_forest(graph)
        spectrum = tr.extract_zs_spectrum(graph)
        M = connectivity_of(spectrum, E)
        zs = tr.zs_measure(qd, spectrum)
        I_res = bx.residue_intensity(qd)
        measure = eqm.solve_equilibrium(spectrum)
        report = eqm.intensity_report(measure, grid_res=cfg["grid_res"])
        basis = bx.cycle_basis(qd)
        pv = bx.periods(qd, basis)

        ser.write_json(outdir / "qd.json",
                       bx.serialize(qd, tol=cfg["tolerances"]["tol_boutroux"]))
        ser.write_spectrum_csv(outdir / "spectrum.csv", spectrum)
        ser.write_json(outdir / "spectrum.json",
                       {"arcs": ser.continuum_to_json(spectrum),
                        "connectivity": M.M.tolist()})
        ser.write_measure_csv(outdir / "measure.csv", measure)
        ser.write_periods_csv(outdir / "periods.csv", pv.values)
        rep = report.as_dict()
        rep["I_zs_moment"] = zs.moment_intensity()
        rep["I_qd_residue"] = I_res
        ser.write_json(outdir / "energy_report.json", rep)
        if want_svg:
            svgmod.write_overlay(outdir / "overlay.svg", spectrum=spectrum,
                                 anchors=E, title="spectrum")
        manifest.update({
            "solver": {k: diag[k] for k in
                       ("iterations", "genus", "degenerate",
                        "final_max_im_period") if k in diag},
            "connectivity": M.M.tolist(),
            "intensities": {"residue": I_res, "zs_moment": zs.moment_intensity(),
                            "measure": report.I_measure,
                            "dirichlet": report.I_dirichlet},
            "runtime": time.time() - t_start,
        })
        tolset = cfg["tolerances"]
        ok = (diag["final_max_im_period"] < tolset["tol_boutroux"]
              and report.bc_residual < tolset["tol_bc"]
              and abs(I_res - report.I_measure) < 1e-5 * max(1.0, abs(I_res)))
        if diag.get("degenerate"):
            exit_code = 2
        elif not ok:
            exit_code = 2
        click.echo(f"intensity (residue) = {I_res:.12g}")
        click.echo(f"intensity (measure) = {report.I_measure:.12g}")
        click.echo(f"intensity (dirichlet) = {report.I_dirichlet:.12g}")
        click.echo(f"connectivity = {M.M.tolist()}")
    except CondensateError as exc:
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        click.echo(f"error: {exc}", err=True)
        _finish(outdir, manifest, 1)
    _finish(outdir, manifest, exit_code)


@main.command("energy")
@click.option("--arcs", default=None, help="JSON arc list")
@click.option("--field", "field_json", default=None,
              help="JSON field coefficients [t_1, ..., t_r]")
@_common
def cmd_energy(arcs, field_json, config_path, out, tol_boutroux, tol_bc,
               tol_traj, tol_energy, samples, seed, grid_res, want_svg):
    """Equilibrium solve and three-way intensity report for explicit arcs."""
    t_start = time.time()
    try:
        cfg = _load(config_path, None, out, tol_boutroux, tol_bc, tol_traj,
                    tol_energy, samples, seed, grid_res)
        if arcs:
            cfg["arcs"] = json.loads(arcs)
        K = ser.continuum_from_config(cfg)
        fld = cfg.get("field")
        if field_json:
            fld = json.loads(field_json)
        field = eqm.ExternalField(fld) if fld else eqm.ExternalField()
    except (ConfigError, ValueError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    outdir = Path(cfg.get("out", "job-energy"))
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": "energy", "config": cfg, "started": t_start}
    try:
        measure = eqm.solve_equilibrium(K, field, strict=False)
        report = eqm.intensity_report(measure, grid_res=cfg["grid_res"])
        rep = report.as_dict()
        if not field.is_default:
            rep["I_phi"] = eqm.intensity_phi(measure, field)
        ser.write_measure_csv(outdir / "measure.csv", measure)
        ser.write_json(outdir / "energy_report.json", rep)
        if want_svg:
            svgmod.write_overlay(outdir / "overlay.svg", spectrum=K,
                                 title="contour")
        manifest["intensities"] = rep
        manifest["runtime"] = time.time() - t_start
        click.echo(f"I_measure = {report.I_measure:.12g}")
        click.echo(f"I_residue = {report.I_residue:.12g}")
        click.echo(f"I_dirichlet = {report.I_dirichlet:.12g}")
        exit_code = 0
        if measure.diagnostics.get("negative_density"):
            exit_code = 2
    except CondensateError as exc:
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        click.echo(f"error: {exc}", err=True)
        _finish(outdir, manifest, 1)
    _finish(outdir, manifest, exit_code)


DEFAULT_CHECKS = ("s_property", "schiffer", "jenkins_self", "stagnation",
                  "intensity")


@main.command("verify")
@click.option("--anchors", default=None, help='JSON anchor list')
@click.option("--checks", default=None,
              help="comma list from s_property,schiffer,jenkins_self,"
                   "stagnation,intensity")
@_common
def cmd_verify(anchors, checks, config_path, out, tol_boutroux, tol_bc,
               tol_traj, tol_energy, samples, seed, grid_res, want_svg):
    """Optimality checks on the traced spectrum of an anchor set, or on
    explicit arcs given in the configuration."""
    t_start = time.time()
    try:
        cfg = _load(config_path, anchors, out, tol_boutroux, tol_bc, tol_traj,
                    tol_energy, samples, seed, grid_res)
        names = tuple((checks or ",".join(cfg.get("checks", DEFAULT_CHECKS))
                       ).split(","))
        if int(cfg["samples"]) <= 0:
            raise ConfigError("samples must be positive")
        have_anchors = "anchors" in cfg
        have_arcs = "arcs" in cfg
        if not have_anchors and not have_arcs:
            raise ConfigError("verify needs anchors or arcs")
    except (ConfigError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    outdir = Path(cfg.get("out", "job-verify"))
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": "verify", "config": cfg, "started": t_start}
    results = {}
    hard_fail = False
    try:
        E = ser.anchors_from_config(cfg) if have_anchors else None
        qd = None
        if have_arcs:
            K = ser.continuum_from_config(cfg)
        else:
            qd, diag = bx.solve_boutroux(
                E, seed=cfg.get("boutroux_seed"),
                tol=cfg["tolerances"]["tol_boutroux"])
            K = tr.extract_zs_spectrum(tr.build_critical_graph(qd))
        measure = eqm.solve_equilibrium(K, strict=False)
        is_reference = qd is not None

        if "s_property" in names:
            res = vf.s_property_residual(measure, n_samples=cfg["samples"])
            ok = res < 1e-5 if is_reference else res > 1e-2
            results["s_property"] = {"residual": res, "pass": bool(ok),
                                     "expected": "small" if is_reference else "large"}
        if "schiffer" in names and E is not None:
            cert = vf.schiffer_certificate(measure, E)
            ok = cert.residual < 1e-5 if is_reference else cert.residual > 1e-2
            results["schiffer"] = {"residual": cert.residual, "pass": bool(ok)}
        if "jenkins_self" in names:
            rep = vf.jenkins_check(measure, K, n_samples=cfg["samples"])
            results["jenkins_self"] = dict(rep.summary(), **{"pass": rep.overall})
        if "stagnation" in names:
            st = eqm.stagnation_points(eqm.quasimomentum(measure), strict=False)
            ok = st.total == K.n_floating
            results["stagnation"] = {"found": st.total,
                                     "floating_components": K.n_floating,
                                     "points": [[p.real, p.imag] for p in st.points],
                                     "pass": bool(ok)}
        if "intensity" in names:
            rep = eqm.intensity_report(measure, grid_res=cfg["grid_res"])
            ok = (rep.residual_rm < 1e-6 * max(1.0, rep.I_measure)
                  and rep.residual_md < 1e-2 * max(1.0, rep.I_measure))
            results["intensity"] = dict(rep.as_dict(), **{"pass": bool(ok)})
        hard_fail = any(not r.get("pass", True) for r in results.values())
        ser.write_json(outdir / "verify_report.json", results)
        if want_svg:
            svgmod.write_overlay(outdir / "overlay.svg", spectrum=K, anchors=E,
                                 title="verify")
        for name, r in results.items():
            click.echo(f"{name}: {'PASS' if r.get('pass') else 'FAIL'} {r}")
        manifest["results"] = results
        manifest["runtime"] = time.time() - t_start
    except CondensateError as exc:
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        click.echo(f"error: {exc}", err=True)
        _finish(outdir, manifest, 1)
    _finish(outdir, manifest, 1 if hard_fail else 0)


@main.command("compare-classes")
@click.option("--x", "x_half", type=float, default=1.0,
              help="half-separation of the symmetric outer anchors")
@click.option("--t-range", default="[0.4,3.0]",
              help="JSON [t_lo, t_hi] sweep of the middle-anchor height")
@click.option("--n-sweep", type=int, default=5)
@click.option("--budget", type=int, default=300)
@_common
def cmd_compare_classes(x_half, t_range, n_sweep, budget, config_path, out,
                        tol_boutroux, tol_bc, tol_traj, tol_energy, samples,
                        seed, grid_res, want_svg):
    """Energy curves of two connectivity classes over a one-parameter
    anchor family (symmetric three-anchor sweep), with the crossover
    bracketed by bisection."""
    t_start = time.time()
    try:
        cfg = _load(config_path, None, out, tol_boutroux, tol_bc, tol_traj,
                    tol_energy, samples, seed, grid_res)
        sweep = cfg.get("compare", {})
        x_half = float(sweep.get("x", x_half))
        lo, hi = sweep.get("t_range", json.loads(t_range))
        n_sweep = int(sweep.get("n_sweep", n_sweep))
        budget = int(sweep.get("budget", budget))
        if n_sweep < 2:
            raise ConfigError("n_sweep must be at least 2")
    except (ConfigError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    outdir = Path(cfg.get("out", "job-compare"))
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": "compare-classes", "config": cfg, "started": t_start}
    try:
        result = sweep_crossover(x_half, lo, hi, n_sweep, budget,
                                 tol=cfg["tolerances"]["tol_energy"],
                                 outdir=outdir if want_svg else None)
        ser.write_json(outdir / "crossover.json", result)
        manifest["crossover"] = result
        manifest["runtime"] = time.time() - t_start
        if result.get("crossover") is not None:
            click.echo(f"crossover at t* = {result['crossover']:.6g} "
                       f"(|dI| = {result['gap']:.3g})")
        else:
            click.echo("no crossover inside the sweep range")
    except CondensateError as exc:
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        click.echo(f"error: {exc}", err=True)
        _finish(outdir, manifest, 1)
    _finish(outdir, manifest, 0)


def class_energies(x_half: float, t: float, budget: int = 300,
                   warm=None):
    """Minimized intensities of the two classes of the symmetric family
    {-x+i, x+i, i t}: mutually connected (floating star) versus all
    grounded.  Returns (I_star, I_ground, K_star, K_ground, warm_params).
    """
    E = AnchorSet([-x_half + 1j, x_half + 1j, 1j * t])
    M_star = ConnectivityMatrix.required(3, pairs=[(1, 2), (1, 3), (2, 3)])
    fam_star = vf.SplineContourFamily(
        E, [(("anchor", 0), ("junction", 0)),
            (("anchor", 1), ("junction", 0)),
            (("anchor", 2), ("junction", 0))], n_ctrl=2)
    seeds = {("junction", 0): 1j * (0.4 + 0.45 * t)}
    x0 = warm[0] if warm and warm[0] is not None else fam_star.initial_params(seeds)
    Ks, ms, xs, _ = vf.minimize_in_class(E, M_star, fam_star, x0, budget=budget)

    M_gnd = ConnectivityMatrix.required(3, grounded=[1, 2, 3])
    fam_gnd = vf.SplineContourFamily(
        E, [(("anchor", 0), ("ground", -x_half)),
            (("anchor", 1), ("ground", x_half)),
            (("anchor", 2), ("ground", 0.0))], n_ctrl=2)
    x1 = warm[1] if warm and warm[1] is not None else fam_gnd.initial_params()
    Kg, mg, xg, _ = vf.minimize_in_class(E, M_gnd, fam_gnd, x1, budget=budget)
    return (ms.intensity_measure(), mg.intensity_measure(), Ks, Kg, (xs, xg))


def sweep_crossover(x_half, lo, hi, n_sweep, budget, tol=1e-3, outdir=None):
    """Sweep the family, bracket the sign change of the class-energy gap,
    and bisect it down to ``tol`` in energy difference."""
    ts = np.linspace(lo, hi, n_sweep)
    rows = []
    warm = None
    for t in ts:
        Is, Ig, Ks, Kg, warm = class_energies(x_half, float(t), budget, warm)
        rows.append({"t": float(t), "I_star": Is, "I_ground": Ig,
                     "diff": Is - Ig})
    bracket = None
    for a, b in zip(rows[:-1], rows[1:]):
        if np.sign(a["diff"]) != np.sign(b["diff"]):
            bracket = (a, b)
            break
    result = {"x": x_half, "sweep": rows, "crossover": None, "gap": None}
    if bracket is None:
        return result
    ta, tb = bracket[0]["t"], bracket[1]["t"]
    fa = bracket[0]["diff"]
    t_star, gap = None, None
    KsKg = None
    for _ in range(24):
        tm = 0.5 * (ta + tb)
        Is, Ig, Ks, Kg, warm = class_energies(x_half, tm, budget, warm)
        d = Is - Ig
        rows.append({"t": tm, "I_star": Is, "I_ground": Ig, "diff": d})
        t_star, gap, KsKg = tm, abs(d), (Ks, Kg)
        if abs(d) < tol:
            break
        if np.sign(d) == np.sign(fa):
            ta, fa = tm, d
        else:
            tb = tm
    result["crossover"] = t_star
    result["gap"] = gap
    result["sweep"] = sorted(rows, key=lambda r: r["t"])
    if outdir is not None and KsKg is not None:
        E = AnchorSet([-x_half + 1j, x_half + 1j, 1j * t_star])
        svgmod.write_overlay(Path(outdir) / "crossover.svg",
                             spectrum=KsKg[0], candidate=KsKg[1], anchors=E,
                             title=f"crossover t={t_star:.4f}")
    return result


if __name__ == "__main__":
    main()
