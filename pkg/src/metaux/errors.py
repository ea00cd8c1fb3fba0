"""Exception types shared across the package."""


class MetauxError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MetauxError, ValueError):
    """Operand shapes violate a primitive's shape rule."""


class UnknownKindError(MetauxError, ValueError):
    """Primitive kind is not registered."""


class GraphError(MetauxError, RuntimeError):
    """Invalid use of a computation graph (bad root, mixed graphs, ...)."""


class CheckpointError(MetauxError, ValueError):
    """Parameter checkpoint is malformed or inconsistent with the config."""


class ConfigError(MetauxError, ValueError):
    """A configuration value violates its invariants."""


class PoolError(MetauxError, ValueError):
    """A sample pool cannot support the requested episode shape."""
