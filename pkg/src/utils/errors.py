class LabError(Exception):
    """Base class for errors raised by the laboratory."""


class ConfigError(LabError, ValueError):
    """Invalid parameters or configuration.

    Collects every problem found so that a single report names all offending fields.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NumericFailure(LabError, ArithmeticError):
    """Non-finite state, score or loss."""

    def __init__(self, message: str, position=None, t=None):
        self.position = position
        self.t = t
        super().__init__(message)
