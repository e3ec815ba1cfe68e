"""Exception types shared across the package.

Hard failures raise; recoverable conditions (degeneracies the solvers are
allowed to report and continue from) are represented as flags on result
objects and only use these classes when the caller asked for strictness.
"""


class CondensateError(Exception):
    """Base class for all package-specific errors."""


class AnchorNotOnContinuum(CondensateError):
    """An anchor is farther than the matching tolerance from every arc."""


class EmptyContinuum(CondensateError):
    """Operation requires a non-empty poly-continuum."""


class PoleEvaluation(CondensateError):
    """Quadratic differential evaluated too close to one of its poles."""


class BranchJump(CondensateError):
    """Square-root branch continuation lost track of the sheet."""


class QuadratureFailure(CondensateError):
    """Adaptive quadrature did not reach the requested tolerance."""


class NewtonDivergence(CondensateError):
    """Newton iteration for the real-period conditions failed to converge."""


class DegenerateSurface(CondensateError):
    """A numerator root collided with a pole (reported, usually non-fatal)."""


class NotCritical(CondensateError):
    """Point is neither a pole nor a zero of the quadratic differential."""


class StepCollapse(CondensateError):
    """Trajectory integrator step size collapsed away from any critical point."""


class GraphInconsistency(CondensateError):
    """Critical-graph valence or forest constraints violated after merging."""


class DegenerateSpectrum(CondensateError):
    """Extracted spectrum is empty (all level-zero edges lie on the real axis)."""


class IllConditioned(CondensateError):
    """Collocation matrix condition estimate above threshold."""

    def __init__(self, estimate, threshold):
        self.estimate = estimate
        self.threshold = threshold
        super().__init__(f"condition estimate {estimate:.3e} above {threshold:.3e}")


class NegativeDensity(CondensateError):
    """Equilibrium density came out negative for the default field."""


class EvaluationOnSupport(CondensateError):
    """Field evaluated on (or too close to) the measure's support."""


class GridTooCoarse(CondensateError):
    """Dirichlet-energy grid residual above its own tolerance."""


class FieldMismatch(CondensateError):
    """Measure was solved against a different external field."""


class CountMismatch(CondensateError):
    """Stagnation-point count disagrees with the floating-component count."""


class TooCloseToEndpoint(CondensateError):
    """Sample lies inside the endpoint grading zone."""


class StalledAtStagnation(CondensateError):
    """Orthogonal trajectory reached a stagnation point (ascent ambiguous)."""


class DeformationLeftClass(CondensateError):
    """A deformation family member left the prescribed connectivity class."""


class ClassEscape(CondensateError):
    """Descent step produced a contour outside the connectivity class."""


class NoConvergence(CondensateError):
    """Iteration budget exhausted without meeting the convergence test."""


class ConfigError(CondensateError):
    """Malformed job configuration."""
