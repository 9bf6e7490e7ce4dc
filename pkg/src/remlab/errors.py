"""Exception types shared across the package.

The command line maps these onto exit codes, so the split matters:
``DataError`` (and subclasses) means the *input data* are unusable, while
plain ``ValueError`` keeps its usual meaning of a bad argument.
"""


class DataError(Exception):
    """Input data are malformed, inconsistent, or unusable."""


class DegenerateDataError(DataError):
    """Data carry no residual information (zero residual variation)."""


class EstimabilityError(DataError):
    """A requested decomposition is rank deficient (e.g. empty design cells)."""
