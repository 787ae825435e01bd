"""Error taxonomy shared across the toolkit.

The CLI maps these onto exit codes: usage errors exit 1, `DataError` exits 2,
`NumericalError` exits 3.
"""

from __future__ import annotations


class DataError(Exception):
    """Bad input data: I/O problems, schema violations, broken invariants."""


class NumericalError(Exception):
    """Numerically infeasible computation, e.g. a rank-deficient regression."""
