"""Exception hierarchy shared across the package."""


class GaitdisError(Exception):
    """Base class for all errors raised by this package."""


class InvalidBoxError(GaitdisError):
    """Person bounding box is degenerate or lies entirely outside the image."""


class IngestionError(GaitdisError):
    """A manifest or its referenced media cannot be ingested."""


class ArchiveVersionError(GaitdisError):
    """Stored container was written with an unsupported format version."""


class ArchiveCorruptError(GaitdisError):
    """Stored container is truncated or structurally invalid."""


class InvalidSpecError(GaitdisError):
    """Synthetic factor specification violates its invariants."""


class CapacityError(GaitdisError):
    """Requested subject count exceeds the separable identity grid."""


class NumericFaultError(GaitdisError):
    """A network produced non-finite activations.

    Carries the offending layer name so training faults are attributable.
    """

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{message} (layer: {layer})")
        self.layer = layer


class InvalidInputError(GaitdisError):
    """An operation received an empty or malformed input."""


class PairingError(GaitdisError):
    """Batch items violate the same-subject / cross-condition pairing rule."""


class ConfigError(GaitdisError):
    """Configuration is invalid; `violations` lists every offending field."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration: " + "; ".join(self.violations))


class UndefinedCosineError(GaitdisError):
    """Cosine similarity requested against a zero-norm feature vector."""


class ProtocolError(GaitdisError):
    """Evaluation protocol is inconsistent with the supplied data."""
