"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific type that applies.
"""


class UsageError(Exception):
    """Bad command line arguments or an unusable configuration."""


class DataFormatError(ValueError):
    """Malformed input data.

    Parsers attach the offending file and 1-based line number when known.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}: "
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)


class NumericError(RuntimeError):
    """A non-finite value surfaced where the math requires finite numbers."""
