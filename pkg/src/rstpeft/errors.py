"""Exception hierarchy shared by every module.

Exit codes follow the CLI contract: 0 success, 2 config error,
3 data error, 4 divergence during training.
"""

from __future__ import annotations


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(ToolkitError):
    """Invalid configuration value or combination."""

    exit_code = 2


class DataError(ToolkitError):
    """Malformed or contract-violating data."""

    exit_code = 3


class SchemaError(DataError):
    """A record violates the parse-file schema or a type invariant."""


class ParseFileError(DataError):
    """A parse file line could not be read; carries the line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ShapeError(DataError):
    """Tensor or sequence dimensions do not match."""


class ContractViolation(DataError):
    """A runtime contract was broken (e.g. a negative weighting entry)."""


class DivergenceError(ToolkitError):
    """Training produced a non-finite loss; names the offending step."""

    exit_code = 4

    def __init__(self, step: int, loss_repr: str = "non-finite"):
        super().__init__(f"divergence at step {step}: loss is {loss_repr}")
        self.step = step
