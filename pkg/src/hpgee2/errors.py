"""Exception hierarchy for hpgee2.

Every error raised by the library derives from :class:`Hpgee2Error`, so callers
(including the CLI) can catch one type. Messages name the operation and, where
it applies, the offending cluster or input line.
"""


class Hpgee2Error(Exception):
    """Base class for all hpgee2 errors."""


class ConfigError(Hpgee2Error):
    """Invalid configuration: bad penalty kind, incompatible mode, bad grid."""


class DataFormatError(Hpgee2Error):
    """Malformed input data (CSV structure, column types, pair layout)."""


class StructuralError(Hpgee2Error):
    """Data that parses but cannot support the requested model.

    Examples: a dataset with no pairs handed to the association stage, or a
    constraint map pointing at coordinates that do not exist.
    """


class NumericalDomainError(Hpgee2Error):
    """A quantity left its mathematical domain (probabilities, odds ratios)."""


class LinearAlgebraError(Hpgee2Error):
    """Singular or hopelessly ill-conditioned linear system."""


class ConvergenceError(Hpgee2Error):
    """An iterative fit exhausted its iteration budget without converging."""
