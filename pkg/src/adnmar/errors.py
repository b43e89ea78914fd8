"""Exception types shared across the toolkit."""


class FormatError(ValueError):
    """A container header is malformed or declares an unsupported layout."""


class CorruptionError(ValueError):
    """A container header and its payload disagree (truncation, size mismatch)."""


class NumericError(RuntimeError):
    """Training produced a non-finite loss.

    ``last_report`` carries the most recent finite loss report, if any,
    so operators can see where the run went off the rails.
    """

    def __init__(self, message, last_report=None):
        super().__init__(message)
        self.last_report = last_report
