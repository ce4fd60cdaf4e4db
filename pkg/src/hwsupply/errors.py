"""Exception hierarchy.

Errors are grouped by the CLI exit code they map to: data problems exit 2,
numerical failures exit 3.
"""


class HwSupplyError(Exception):
    """Base class for every error raised by the package."""


class DataError(HwSupplyError):
    """Input data is malformed or inconsistent."""


class NumericalError(HwSupplyError):
    """A computation could not produce a finite, meaningful result."""


class ValidationFailed(DataError):
    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(f"{len(self.violations)} violation(s):\n{lines}")


class ShareSumViolation(DataError):
    def __init__(self, what, total):
        self.what = what
        self.total = total
        super().__init__(f"shares for {what} sum to {total!r}, expected 1")


class SchemaError(DataError):
    """One or more rows could not be parsed.

    ``issues`` is a list of ``(file, line, message)`` tuples.
    """

    def __init__(self, issues):
        self.issues = list(issues)
        text = "\n".join(f"  {f}:{line}: {msg}" for f, line, msg in self.issues)
        super().__init__(f"schema errors:\n{text}")


class DuplicateKey(SchemaError):
    pass


class NoValidCalibrationYear(DataError):
    pass


class AnchorYearMissing(DataError):
    pass


class MissingField(DataError):
    pass


class MissingShare(DataError):
    pass


class MissingYear(DataError):
    pass


class NoCompleteCountry(DataError):
    pass


class EmptyValidationWindow(DataError):
    pass


class OverlappingGroups(DataError):
    pass


class NegativeInput(DataError):
    pass


class DegenerateAnchors(DataError):
    pass


class EmptyCohort(DataError):
    def __init__(self, cohorts, partial=None):
        self.cohorts = list(cohorts)
        self.partial = partial
        head = ", ".join(f"{s}{a}" for s, a in self.cohorts[:8])
        more = "" if len(self.cohorts) <= 8 else f" (+{len(self.cohorts) - 8} more)"
        super().__init__(f"no defined net rate for cohort(s) {head}{more}")


class EmptyEntryBand(DataError):
    pass


class ZeroObservedTotal(NumericalError):
    pass


class ZeroInflow(NumericalError):
    pass


class ZeroSD(NumericalError):
    pass


class NonFinite(NumericalError):
    pass
