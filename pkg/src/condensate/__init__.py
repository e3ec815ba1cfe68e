"""Minimal-intensity spectral supports for focusing-NLS soliton condensates.

Subpackages
-----------
geom         anchors, arcs, poly-continua, connectivity, Hausdorff metric
boutroux     quadratic differentials and the real-period (Boutroux) solve
tracer       horizontal trajectories, critical graph, spectrum, its measure
equilibrium  log-kernel equilibrium problem, quasimomentum, intensities
verify       optimality checks: S-property, interception, descent, the
             criticality certificate, continuity probes
cli          batch command-line front-end
"""

__version__ = "0.1.0"
