"""Exception taxonomy shared by all modules.

Every error raised on purpose by this package derives from :class:`GlcfError`
and carries a stable ``exit_code`` so the CLI can translate failures into
machine-parsable process exit statuses.
"""


class GlcfError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(GlcfError):
    """Invalid configuration value, unknown key, or incompatible geometry."""

    exit_code = 2


class MissingInputError(GlcfError):
    """A referenced file, directory, or required artifact does not exist."""

    exit_code = 3


class NumericFaultError(GlcfError):
    """NaN/Inf encountered where finite values are required."""

    exit_code = 4


class ContractError(GlcfError):
    """A call-level contract was violated (shape mismatch, bad labels, ...)."""

    exit_code = 5


class CorruptArchiveError(ContractError):
    """Tensor archive manifest and payload disagree."""


class UnsupportedFormatError(ContractError):
    """Tensor archive declares a dtype or layout this reader does not support."""
