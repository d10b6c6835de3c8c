"""Error classes raised by the moelab package.

Every error derives from `MoeLabError` and from the builtin exception
that best describes it, so callers can catch either.
"""


class MoeLabError(Exception):
    """Base class of all moelab errors."""


class InputError(MoeLabError, ValueError):
    """Inconsistent dimensions, bad ranges or mismatched families."""


class DomainError(MoeLabError, ValueError):
    """A function was evaluated outside the domain where it is defined."""


class CapabilityError(MoeLabError, NotImplementedError):
    """A derivative order or feature that is not supported was requested."""


class ConfigError(MoeLabError, ValueError):
    """Invalid run configuration.

    Attributes:
        key: Name of the offending configuration key, if known.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class DivergenceError(MoeLabError, RuntimeError):
    """The fitting objective became non-finite or blew up.

    Attributes:
        epoch: Epoch (1-based) at which divergence was detected.
    """

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class ConstructionError(MoeLabError, RuntimeError):
    """An adversarial sequence could not be constructed."""


class SweepError(MoeLabError, RuntimeError):
    """A rate sweep cannot produce a usable report."""
