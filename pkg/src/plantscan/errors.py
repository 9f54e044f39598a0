"""Exception types shared across the pipeline."""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(ValueError):
    """Malformed input file; message carries the offending line number."""


class SchemaError(ValueError):
    """XML document does not conform to the scene-model schema."""


class TrainingError(RuntimeError):
    """Training diverged; message carries the offending epoch."""


class EstimationError(RuntimeError):
    """Rigid-transform estimation failed (degenerate geometry)."""


class AlignmentError(RuntimeError):
    """Coarse alignment found no model with enough inlier support."""


class RegistrationError(RuntimeError):
    """Scan-chain registration broke; message names the failing pair."""


class StageError(RuntimeError):
    """A pipeline stage is missing an upstream artifact or failed to run."""
