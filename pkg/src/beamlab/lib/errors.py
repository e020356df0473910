from typing import Any


class BeamLabError(Exception):
    """Root of every error raised by the workbench"""

    exit_code: int = 3


class ConfigurationError(BeamLabError):
    """Invalid run setup (lattice, CFL, thresholds, files)"""

    exit_code = 2


class ConfigValidationError(ConfigurationError):
    """A configuration file failed validation.

    Every violation is collected before raising so a single run reports all of them.
    """

    violations: list[tuple[str, str]]

    def __init__(self, violations: list[tuple[str, str]], msg: str = ""):
        self.violations = violations
        msg = msg or "; ".join(f"{field}: {problem}" for field, problem in violations)
        super().__init__(msg)


class OutputError(ConfigurationError):
    """Output directory cannot be written"""

    def __init__(self, path: Any, msg: str = ""):
        self.path = path
        super().__init__(msg or f"cannot write to {path}")


# Geometry and tensor calculus


class DomainError(BeamLabError):
    """A point lies outside the spacetime domain"""

    point: Any

    def __init__(self, point: Any, msg: str = ""):
        self.point = point
        super().__init__(msg or f"point {point} is outside the domain")


class DegeneracyError(BeamLabError):
    """Metric is not invertible or loses Lorentzian signature"""


class StencilError(BeamLabError):
    """Finite-difference stencil leaves the sampled region"""


class InvalidInputError(BeamLabError):
    """Argument violates a precondition (zero vector, bad H0, ...)"""


class DerivativeOrderError(BeamLabError):
    """Requested more derivatives than the metric mode can provide"""

    def __init__(self, order: int, available: int):
        self.order = order
        self.available = available
        super().__init__(f"derivative order {order} requested, only {available} available")


class GeometryError(BeamLabError):
    """Operation not supported on this domain shape or beam geometry"""


# Geodesics and charts


class TangencyError(BeamLabError):
    """Geodesic hits the boundary (nearly) tangentially"""

    def __init__(self, point: Any, incidence: float):
        self.point = point
        self.incidence = incidence
        super().__init__(f"tangential boundary hit at {point} (|g(v, nu)| = {incidence:.3e})")


class StiffnessError(BeamLabError):
    """Geodesic integrator failed to take a step"""


class TransportError(BeamLabError):
    """Parallel transport of the chart frame failed"""


class RadiusError(BeamLabError):
    """Chart radius collapsed below the usable minimum"""

    def __init__(self, radius: float):
        self.radius = radius
        super().__init__(f"chart radius shrank to {radius:.3e}")


class UnreachableError(BeamLabError):
    """Point is outside the recoverable set"""

    def __init__(self, point: Any):
        self.point = point
        super().__init__(f"point {point} is not in the recoverable set")


class SelectionError(BeamLabError):
    """No admissible covector quadruple was found"""


# Beams


class BeamConstructionError(BeamLabError):
    """Beam cannot be continued (conjugate point, lost positivity)"""

    def __init__(self, s: float, msg: str = ""):
        self.s = s
        super().__init__(msg or f"beam construction failed at s = {s:.6g}")


class JetSolveError(BeamLabError):
    """Degree-by-degree jet system is rank deficient"""

    def __init__(self, degree: int, msg: str = ""):
        self.degree = degree
        super().__init__(msg or f"jet system singular at degree {degree}")


class BranchError(BeamLabError):
    """Square-root branch could not be tracked continuously"""

    def __init__(self, s: float):
        self.s = s
        super().__init__(f"square-root branch lost at s = {s:.6g}")


class SamplingError(BeamLabError):
    """Beam tube leaves the lattice or cannot be located"""


class ResolutionError(BeamLabError):
    """Lattice too coarse for the Gaussian width"""

    def __init__(self, nodes_per_efold: float, required: float = 8.0):
        self.nodes_per_efold = nodes_per_efold
        self.required = required
        super().__init__(
            f"{nodes_per_efold:.2f} nodes per transverse e-fold, at least {required:g} needed"
        )


class MatchingError(BeamLabError):
    """Reflected beam could not be matched to the incident one"""


# Forward problem


class SmallnessError(BeamLabError):
    """Contraction iteration is not contracting"""

    def __init__(self, ratio: float, msg: str = ""):
        self.ratio = ratio
        super().__init__(msg or f"iteration ratio {ratio:.3e} is not below 1")


class CompatibilityError(BeamLabError):
    """Boundary data do not vanish to the required order at t = 0"""

    def __init__(self, order: int):
        self.order = order
        super().__init__(f"boundary data violate compatibility at order {order}")


class MaskError(BeamLabError):
    """Region mask selects nodes that are not on the boundary"""


# Linearization and reconstruction


class DependencyError(BeamLabError):
    """Lower-order inputs are missing"""

    def __init__(self, missing: list[Any], msg: str = ""):
        self.missing = missing
        super().__init__(msg or f"missing inputs: {missing}")


class AlignmentError(BeamLabError):
    """Fields live on different lattices"""


class DegenerateBundleError(BeamLabError):
    """Amplitude product at the intersection point is too small"""

    def __init__(self, product: complex):
        self.product = product
        super().__init__(f"amplitude product {abs(product):.3e} is degenerate")


class BundleRejectedError(BeamLabError):
    """Phase diagnostics of a beam bundle failed"""

    def __init__(self, quantity: str, value: float, threshold: float):
        self.quantity = quantity
        self.value = value
        self.threshold = threshold
        super().__init__(f"bundle rejected: {quantity} = {value:.3e} (threshold {threshold:.1e})")
