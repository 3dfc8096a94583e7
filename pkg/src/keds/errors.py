"""Exception types shared across the engine."""


class KedsError(Exception):
    """Base class for all engine errors."""


class DimensionError(KedsError):
    """Shapes or dimensions of two operands do not line up."""


class RankError(KedsError):
    """An operation received a tensor of the wrong rank (e.g. non-scalar backward root)."""


class DegenerateVectorError(KedsError):
    """A vector with norm below the normalization guard was encountered."""


class GraphError(KedsError):
    """Misuse of an autodiff graph, e.g. running backward twice on one forward pass."""


class ConfigError(KedsError):
    """Invalid configuration value or unknown configuration key."""


class FormatError(KedsError):
    """A binary or JSONL artifact failed validation; the message names the offending field."""


class InjectionError(KedsError):
    """A pseudo-token slot referenced a row outside the supplied pseudo block."""


class LengthError(KedsError):
    """A token sequence exceeds the composer's maximum length or is empty."""


class MiningError(KedsError):
    """Pseudo-triplet mining could not satisfy its preconditions."""


class BatchError(KedsError):
    """A training batch violates a loss precondition (e.g. fewer than two pairs)."""


class ScheduleError(KedsError):
    """A step index outside the configured schedule range was requested."""


class EmptyContextError(KedsError):
    """A projection was asked to attend over an empty knowledge context."""


class FeatureLookupError(KedsError):
    """A required feature id is not present in the backing store."""


class PathError(KedsError):
    """A required input file or directory does not exist."""
