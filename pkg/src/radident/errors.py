"""Exception hierarchy shared by all radident modules."""


class RadidentError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(RadidentError):
    """Malformed or inconsistent input (bad file, violated invariant)."""


class NumericalError(RadidentError):
    """Numerical failure: rank deficiency, divergence, no valid pixels."""


class BudgetError(RadidentError):
    """A configured computational budget would be exceeded."""
