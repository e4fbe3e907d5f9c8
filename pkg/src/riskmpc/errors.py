class ContractViolation(ValueError):
    """An operation was called with arguments that break its preconditions."""


class DesignError(RuntimeError):
    """An offline design step (ancillary gain, terminal set) could not be completed."""


class NumericalError(RuntimeError):
    """A factorization or solve failed beyond the configured safeguards."""
