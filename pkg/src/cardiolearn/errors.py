"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """An API contract was violated (e.g. backward on a non-scalar node)."""


class ConfigError(ValueError):
    """A configuration value or file is invalid."""


class CapacityError(RuntimeError):
    """A shared layer has no free weights left for a new task."""

    def __init__(self, message, occupancy=None):
        super().__init__(message)
        self.occupancy = occupancy
