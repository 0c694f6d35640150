"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    """Raised when a metric needs both classes but only one is present."""


class DuplicatePublishError(RuntimeError):
    pass


class StaleAckError(RuntimeError):
    pass


class SimulationTimeout(RuntimeError):
    """The stop condition fired with work still outstanding.

    ``metrics`` and ``tables`` hold whatever was collected up to that point.
    """

    def __init__(self, message, metrics=None, tables=None):
        super().__init__(message)
        self.metrics = metrics
        self.tables = tables
