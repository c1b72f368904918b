"""Exception hierarchy shared by all ndsnn modules."""


class NdsnnError(Exception):
    """Base class for every error raised by this package."""

    kind = "error"


class DimensionError(NdsnnError, ValueError):
    kind = "dimension"


class ConfigError(NdsnnError, ValueError):
    kind = "config"


class CountError(NdsnnError, ValueError):
    kind = "count"


class FormatError(NdsnnError, ValueError):
    kind = "format"


class ScheduleError(NdsnnError, ValueError):
    kind = "schedule"


class StateError(NdsnnError, RuntimeError):
    kind = "state"


class DataError(NdsnnError, ValueError):
    kind = "data"


class DivergenceError(NdsnnError, RuntimeError):
    kind = "divergence"
