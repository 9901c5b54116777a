"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operands have incompatible tensor shapes."""


class ConfigError(ValueError):
    """A configuration object or stage combination is invalid."""


class CapacityError(ValueError):
    """A dataset split cannot supply the requested classes or samples."""


class FormatError(ValueError):
    """A serialized file (tensor, manifest, checkpoint) is malformed."""


class TruncatedFileError(OSError):
    """A serialized file ended before its declared payload."""


class StateError(RuntimeError):
    """An optimizer or training loop is in an unusable state."""
