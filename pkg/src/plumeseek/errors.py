"""Exception types shared across the package."""


class PlumeSeekError(Exception):
    """Base class for all library errors."""


class CoincidentPointError(PlumeSeekError):
    """Concentration requested closer to the release point than the separation guard."""


class WeightUnderflowError(PlumeSeekError):
    """Every particle likelihood underflowed; the posterior update is undefined."""


class GainInstabilityError(PlumeSeekError):
    """The closed-loop matrix (I + K) is not Schur stable."""


class NoFeasibleRadiusError(PlumeSeekError):
    """Containment conditions admit no positive terminal-set radius."""


class ConfigError(PlumeSeekError):
    """Invalid or inconsistent run configuration."""
