"""Exception hierarchy shared across the package."""


class MargsensError(Exception):
    """Base class for all package errors."""


class ParseError(MargsensError):
    def __init__(self, line, reason=""):
        self.line = line
        super().__init__(f"line {line}: {reason}" if reason else f"line {line}")


class IncompleteGrid(MargsensError):
    def __init__(self, site, date):
        self.site = site
        self.date = date
        super().__init__(f"missing value for site {site} on {date}")


class CovariateGap(MargsensError):
    def __init__(self, date):
        self.date = date
        super().__init__(f"no covariate row for {date}")


class DomainError(MargsensError, ValueError):
    pass


class DegenerateSample(MargsensError):
    pass


class FitFailure(MargsensError):
    def __init__(self, message, site=None):
        self.site = site
        if site is not None:
            message = f"site {site}: {message}"
        super().__init__(message)


class InsufficientExceedances(FitFailure):
    pass


class SelectionFailure(MargsensError):
    pass


class BasisError(MargsensError, ValueError):
    pass


class DegenerateYear(MargsensError):
    def __init__(self, year):
        self.year = year
        super().__init__(f"zero pooled standard deviation in year block {year}")


class AlignmentError(MargsensError, ValueError):
    pass


class NoJointExceedances(MargsensError):
    pass


class WindowTooShort(MargsensError):
    pass


class CovarianceError(MargsensError):
    pass


class OracleError(MargsensError):
    pass
