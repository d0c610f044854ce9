"""Exception hierarchy shared by all modules."""


class ToolkitError(Exception):
    """Base class for toolkit failures."""


class SingularGeometryError(ToolkitError):
    """Normal vector or boundary gradient degenerates."""


class ConfigurationError(ToolkitError):
    """Inconsistent problem or run configuration."""


class DomainError(ToolkitError, ValueError):
    """Argument outside the admissible domain of a formula."""


class RangeError(ToolkitError, ValueError):
    """Requested time outside a trajectory span."""


class StiffnessError(ToolkitError):
    """Step size underflow in the integrator."""


class QuadratureError(ToolkitError):
    """Torus quadrature failed to converge."""


class SamplingError(ToolkitError):
    """Domain sampling produced no usable points."""


class ConvergenceError(ToolkitError):
    """Iterative procedure did not converge."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics
