# src/core/errors.py
# Error hierarchy shared by every module. Each error carries a machine-readable
# code and the CLI exit status it maps to.


class FuseplanError(Exception):
    exit_code = 4
    default_code = "internal"

    def __init__(self, message: str, code: str = None):
        super().__init__(message)
        self.code = code or self.default_code


class ConfigError(FuseplanError, ValueError):
    """Invalid input values, malformed files, broken references."""

    exit_code = 2
    default_code = "config.invalid"


class InfeasibleError(FuseplanError):
    """The request is well-formed but cannot be satisfied."""

    exit_code = 3
    default_code = "infeasible"


class LayoutError(InfeasibleError):
    default_code = "layout.infeasible"


class ScheduleError(FuseplanError):
    default_code = "schedule.invalid"


class NeighborFrozenError(ScheduleError):
    """No valid neighbor could be drawn. `best` holds the best schedule reached."""

    default_code = "anneal.frozen"
    best = None


class OracleLimitError(ConfigError):
    default_code = "oracle.too_large"
