"""Semantic exceptions shared across the package."""


class ContractViolation(ValueError):
    """An argument violated a documented precondition or invariant."""


class DataFormatError(ValueError):
    """An input file could not be parsed; message carries the line number."""
