"""Exception types shared across the simulator."""


class MeshShellError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(MeshShellError):
    """Invalid parameters, malformed config files or inconsistent options."""


class DomainError(MeshShellError):
    """A point was supplied outside the domain an operator acts on."""


class SubgraphViolation(MeshShellError):
    """The deformed lateral wall is no longer a radial graph over the reference surface."""


class LipschitzViolation(MeshShellError):
    """Displacement or its slope exceeded the configured W^{1,inf} cap."""


class StateError(MeshShellError):
    """A stored state does not satisfy the consistency conditions it should."""


class SolverError(MeshShellError):
    """A linear solve failed or returned a non-finite result."""
