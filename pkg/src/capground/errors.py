"""Exception types shared across the package."""


class CapgroundError(Exception):
    """Base class for all errors raised by this package."""


class EmptyCaption(CapgroundError):
    """Caption is empty or tokenizes to nothing."""


class ParseError(CapgroundError):
    """Malformed corpus record; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DimensionMismatch(CapgroundError):
    """Feature vector length disagrees with the corpus feature dimension."""


class ConfigError(CapgroundError):
    """Invalid or inconsistent configuration."""


class ShapeError(CapgroundError):
    """Tensor operands have incompatible shapes."""


class NumericalError(CapgroundError):
    """An operation produced NaN or Inf."""


class EmptyKeysError(CapgroundError):
    """Attention invoked with zero keys."""


class ContractError(CapgroundError):
    """A caller violated an operation precondition."""


class VocabError(CapgroundError):
    """Token id outside the vocabulary."""


class AlignmentError(CapgroundError):
    """Triplet head token index outside the caption."""


class OracleMissing(CapgroundError):
    """Operation requires oracle alignments but the corpus has none."""


class CheckpointError(CapgroundError):
    """Corrupt or truncated checkpoint file."""


class IoError(CapgroundError):
    """Filesystem failure while writing artifacts."""


class StageError(CapgroundError):
    """A pipeline stage failed; names the stage, keeps partial artifacts."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
