"""Exception hierarchy for propseg.

All library-raised errors derive from PropsegError so callers (notably the
CLI) can separate validation failures from genuine bugs.
"""


class PropsegError(Exception):
    """Base class for all errors raised by this library."""


class ShapeError(PropsegError, ValueError):
    """Array dimensions are incompatible; the message names both shapes."""


class InputError(PropsegError, ValueError):
    """An argument value violates its documented domain."""


class ConfigError(InputError):
    """A configuration file or override is malformed (unknown key, bad type)."""


class ContractError(PropsegError, RuntimeError):
    """An API precondition was violated (e.g. propagating with an
    unnormalized affinity matrix, or predicting before fitting)."""


class StaleTrackError(ContractError):
    """Propagation was requested from a frame older than the allowed
    temporal window; the caller should retire the track."""


class CodecError(PropsegError, ValueError):
    """A serialized payload is corrupt."""


class BadMagicError(CodecError):
    """A parameter file does not start with the expected magic bytes."""


class TruncatedFileError(CodecError):
    """A serialized payload ended before all declared data was read."""


class ParamShapeError(CodecError):
    """A parameter file's shape header is structurally invalid."""
