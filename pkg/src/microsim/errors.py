"""Exception hierarchy.

Input problems derive from :class:`InputError` (CLI exit code 2); numeric and
model failures derive from :class:`ModelError` (CLI exit code 1).
"""


class MicrosimError(Exception):
    """Base class for all package errors."""


class InputError(MicrosimError, ValueError):
    pass


class ModelError(MicrosimError, ArithmeticError):
    pass


# ingest
class EmptyFile(InputError):
    pass


class MissingColumn(InputError):
    def __init__(self, attribute, path=None):
        self.attribute = attribute
        self.path = path
        where = f" in {path}" if path else ""
        super().__init__(f"missing attribute column {attribute!r}{where}")


class MissingValue(InputError):
    def __init__(self, row, attribute):
        self.row = row
        self.attribute = attribute
        super().__init__(f"row {row}: missing value for attribute {attribute!r}")


class UnparseableCell(InputError):
    def __init__(self, row, column, value):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r}")


class ZoneMismatch(InputError):
    pass


class NegativeCount(InputError):
    pass


class PopulationMismatch(InputError):
    def __init__(self, zone, constraint, expected, got):
        self.zone = zone
        self.constraint = constraint
        super().__init__(
            f"zone {zone}: constraint {constraint!r} sums to {got}, "
            f"first constraint sums to {expected}"
        )


class ClassificationError(InputError):
    def __init__(self, individual, constraint, n_matches):
        self.individual = individual
        self.constraint = constraint
        self.n_matches = n_matches
        super().__init__(
            f"individual {individual} matches {n_matches} categories "
            f"of constraint {constraint!r} (expected exactly 1)"
        )


class MapError(InputError):
    pass


class DimensionMismatch(InputError):
    pass


# ipf
class EmptyDimension(InputError):
    pass


class NonFinite(ModelError):
    pass


# integerise
class NegativeWeight(InputError):
    pass


class NonFiniteWeight(InputError):
    pass


class ThresholdExhausted(ModelError):
    pass


class AllZeroWeights(ModelError):
    pass


class DeficitUnfillable(ModelError):
    pass


class TruncationOvershoot(ModelError):
    pass


class ZoneError(MicrosimError):
    """Wraps a per-zone failure with its (run, zone) context."""

    def __init__(self, error, zone, run=None, method=None):
        self.error = error
        self.zone = zone
        self.run = run
        self.method = method
        ctx = [f"zone={zone}"]
        if run is not None:
            ctx.insert(0, f"run={run}")
        if method is not None:
            ctx.insert(0, f"method={method}")
        super().__init__(f"[{', '.join(ctx)}] {type(error).__name__}: {error}")


# metrics
class ShapeMismatch(InputError):
    pass


class DegenerateVariance(ModelError):
    pass


class EmptyTable(ModelError):
    pass


class MissingZone(InputError):
    pass
