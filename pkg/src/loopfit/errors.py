"""Exception taxonomy shared across the package.

Plain ValueError is used for ordinary argument mistakes; the classes here
mark conditions the CLI maps to distinct exit codes.
"""


class LoopfitError(Exception):
    """Base class for package-specific failures."""


class ConfigError(LoopfitError):
    """Bad configuration, unknown keys, or misuse of a model mode."""


class FrameFormatError(LoopfitError):
    """A frame file is corrupt or truncated; carries the failing byte offset."""

    def __init__(self, message, byte_offset):
        super().__init__(f"{message} (at byte {byte_offset})")
        self.byte_offset = byte_offset


class CorpusError(LoopfitError):
    """Corpus-level inconsistency, e.g. mixed feature widths in one corpus."""


class TripletLayoutError(LoopfitError):
    """A mini-batch cannot be arranged into valid speaker triples."""


class NumericError(LoopfitError):
    """Non-finite values in a forward pass, loss, or gradient."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
