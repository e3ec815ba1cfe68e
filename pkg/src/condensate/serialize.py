"""Job configuration and artifact input/output.

Configurations are JSON documents with the schema

    {
      "anchors":      [[re, im], ...],              # required for solves
      "arcs":         [[[re, im], ...], ...],       # explicit contours
      "connectivity": [[0|1, ...], ...],            # class requirement
      "field":        [t_1, ..., t_r],              # default [1.0]
      "tolerances":   {"tol_boutroux": ..., "tol_bc": ...,
                       "tol_traj": ..., "tol_energy": ...},
      "seed":         0,                            # RNG seed for sampling
      "boutroux_seed": "naive" | "square" | "tree" | {"coeffs": [...]},
      "grid_res":     256,
      "samples":      24,
      "out":          "jobdir"
    }

All floats are written with 17 significant digits so round-trips are exact.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geom import AnchorSet, Arc, ConnectivityMatrix, PolyContinuum

DEFAULT_TOLERANCES = {
    "tol_boutroux": 1e-10,
    "tol_bc": 1e-6,
    "tol_traj": 1e-8,
    "tol_energy": 1e-4,
}


def fmt(x: float) -> float:
    """Round-trip-safe float for JSON output."""
    return float(f"{float(x):.17g}")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return validate_config(raw, source=str(path))


def validate_config(raw: dict, source: str = "<config>") -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be an object")
    cfg = dict(raw)
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(cfg.get("tolerances", {}))
    for k, v in tol.items():
        if not (isinstance(v, (int, float)) and v > 0):
            raise ConfigError(f"{source}: tolerance {k}={v!r} must be positive")
    cfg["tolerances"] = tol
    if "anchors" in cfg:
        pts = cfg["anchors"]
        if (not isinstance(pts, list) or not pts
                or any(len(p) != 2 for p in pts)):
            raise ConfigError(f"{source}: anchors must be a list of [re, im]")
        for p in pts:
            if p[1] <= 0:
                raise ConfigError(
                    f"{source}: anchor {p} below or on the real axis")
    if "samples" in cfg and int(cfg["samples"]) <= 0:
        raise ConfigError(f"{source}: samples must be positive")
    cfg.setdefault("seed", 0)
    cfg.setdefault("grid_res", 256)
    cfg.setdefault("samples", 24)
    return cfg


def anchors_from_config(cfg: dict) -> AnchorSet:
    if "anchors" not in cfg:
        raise ConfigError("configuration has no anchors")
    return AnchorSet([complex(a, b) for a, b in cfg["anchors"]])


def continuum_from_config(cfg: dict) -> PolyContinuum:
    if "arcs" not in cfg:
        raise ConfigError("configuration has no arcs")
    arcs = []
    for arc in cfg["arcs"]:
        pts = np.array([complex(a, b) for a, b in arc])
        arcs.append(Arc(pts))
    return PolyContinuum(arcs)


def connectivity_from_config(cfg: dict) -> ConnectivityMatrix | None:
    if "connectivity" not in cfg:
        return None
    return ConnectivityMatrix(np.asarray(cfg["connectivity"], dtype=int))


def continuum_to_json(K: PolyContinuum) -> list:
    return [[[fmt(z.real), fmt(z.imag)] for z in a.samples] for a in K.arcs]


def write_json(path, payload: dict):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_roundtrip(payload), fh, indent=1)
        fh.write("\n")


def _roundtrip(obj):
    if isinstance(obj, dict):
        return {k: _roundtrip(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_roundtrip(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return fmt(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_roundtrip(v) for v in obj.tolist()]
    if isinstance(obj, complex):
        return [fmt(obj.real), fmt(obj.imag)]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def write_spectrum_csv(path, spectrum: PolyContinuum, p_of_arc=None):
    """CSV rows: arc id, arclength s, Re z, Im z, p (metric length)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arc", "s", "re", "im", "p"])
        for ai, arc in enumerate(spectrum.arcs):
            pv = p_of_arc(ai) if p_of_arc else np.zeros(len(arc.samples))
            for s, z, p in zip(arc.cumlen, arc.samples, pv):
                w.writerow([ai, f"{s:.17g}", f"{z.real:.17g}",
                            f"{z.imag:.17g}", f"{p:.17g}"])


def write_measure_csv(path, measure):
    """CSV rows: arc id, s, Re z, Im z, density u, quadrature weight."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arc", "s", "re", "im", "u", "weight"])
        for ai, s, z, u, wt in zip(measure.arc_index, measure.arclength,
                                   measure.nodes, measure.density,
                                   measure.weights):
            w.writerow([int(ai), f"{s:.17g}", f"{z.real:.17g}",
                        f"{z.imag:.17g}", f"{u:.17g}", f"{wt:.17g}"])


def write_periods_csv(path, periods):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loop", "re", "im"])
        for k, v in enumerate(np.atleast_1d(periods)):
            w.writerow([k, f"{v.real:.17g}", f"{v.imag:.17g}"])


def write_margins_csv(path, records):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "intensity", "margin", "in_class"])
        for r in records:
            w.writerow([f"{r.theta:.17g}", f"{r.intensity:.17g}",
                        f"{r.margin:.17g}", int(r.in_class)])
