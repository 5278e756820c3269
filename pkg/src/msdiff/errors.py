"""Exception types shared across the package."""


class MsdiffError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MsdiffError, ValueError):
    """Operands have incompatible shapes."""


class ContractError(MsdiffError, ValueError):
    """An argument violates a documented precondition."""


class NonFiniteError(MsdiffError, ArithmeticError):
    """A tensor operation produced NaN or Inf."""


class VocabError(MsdiffError, KeyError):
    """A token or id is not part of the vocabulary."""


class ParseError(MsdiffError, ValueError):
    """A file or string could not be parsed."""


class ConfigError(MsdiffError, ValueError):
    """A run configuration is malformed."""


class CheckpointError(MsdiffError, ValueError):
    """A checkpoint file is malformed or incompatible."""


class RenderError(MsdiffError, RuntimeError):
    """Scene construction failed after bounded retries."""
