"""Exceptions raised by the jetfit package."""


class JetFitError(Exception):
    """Base class for every error raised by jetfit."""
    pass


class InvalidInputError(JetFitError, ValueError):
    """Input violates a precondition (non-finite value, bad shape, bad count)."""
    pass


class DegeneratePatchError(JetFitError):
    """Neighborhood can't support a fit (coincident or collinear points)."""
    pass


class UnsupportedOrderError(JetFitError, ValueError):
    """Jet order outside 1..4, or an operation that needs a higher order."""
    pass


class SingularFitError(JetFitError):
    """Normal matrix not factorizable even after ridge escalation."""

    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


class NumericalFaultError(JetFitError, ArithmeticError):
    """Non-finite value produced inside the weight network or the adjoint solve."""

    def __init__(self, layer: str, message: str = "non-finite activation"):
        super().__init__(f"{message} at layer '{layer}'")
        self.layer = layer


class PcpnetFormatError(JetFitError):
    """Sibling files of a PCPNet-style shape disagree or are malformed."""
    pass


class PcpnetParseError(PcpnetFormatError):
    """Token in a PCPNet-style file could not be parsed."""

    def __init__(self, path, line_number: int, token: str):
        super().__init__(f"{path}:{line_number}: can't parse '{token}'")
        self.path = path
        self.line_number = line_number


class CheckpointError(JetFitError):
    """Checkpoint container is unreadable or of an unsupported version."""
    pass
