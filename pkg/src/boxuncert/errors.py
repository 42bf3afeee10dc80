"""Exception types shared across the package."""


class BoxUncertError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(BoxUncertError):
    """Invalid configuration (grid config, synth config, CLI flags)."""


class DomainError(BoxUncertError):
    """A value lies outside the mathematical domain of an operation."""


class FormatError(BoxUncertError):
    """A file does not conform to its documented format contract."""


class NoClosedFormError(BoxUncertError):
    """The transform chain has no closed-form moment propagation."""
