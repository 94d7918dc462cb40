"""Exception taxonomy; each maps to a CLI exit code (see cli.EXIT_CODES)."""


class HazeloopError(Exception):
    """Base class for all package errors."""


class InputError(HazeloopError, ValueError):
    """Malformed or out-of-contract input (shapes, ranges, non-finite)."""


class ConfigError(HazeloopError):
    """Bad configuration: unknown key, unparseable value, invalid combination."""


class RoutingError(HazeloopError):
    """Instruction could not be routed to any registered task adapter."""


class NumericError(HazeloopError):
    """Non-finite values encountered where finiteness is a contract."""


class DegenerateTransmissionError(InputError):
    """Transmission fell below the inversion guard on some pixels."""

    def __init__(self, fraction: float, t_min: float):
        self.fraction = fraction
        self.t_min = t_min
        super().__init__(
            f"transmission < {t_min} on {fraction:.1%} of pixels; inversion refused"
        )
