"""Exception types raised across the package."""


class TrajsslError(Exception):
    """Base class for package-specific failures."""


class DegeneratePolyline(TrajsslError):
    """Polyline has fewer than 2 distinct points / zero arc length."""


class HorizonOverflow(TrajsslError):
    """Scenario horizon exceeds the padding target."""


class ScenarioRejected(TrajsslError):
    """Scenario cannot be standardized (e.g. incomplete target agent)."""


class EmptyBank(TrajsslError):
    """No scenario survived bank construction."""


class InfeasibleHorizon(TrajsslError):
    """Scenario too short for two non-overlapping windows."""


class PairRejected(TrajsslError):
    """No agent is eligible in any feasible window pair."""


class ShapeError(TrajsslError):
    """Operand dimensions do not agree."""


class BatchTooSmall(TrajsslError):
    """Batch normalization in train mode needs at least 2 rows."""


class StoreMismatch(TrajsslError):
    """Two parameter stores disagree in names or shapes."""


class DegenerateEmbedding(TrajsslError):
    """Zero-norm embedding cannot enter a cosine similarity."""


class EmptyTarget(TrajsslError):
    """Reconstruction target has no valid step."""


class CheckpointMismatch(TrajsslError):
    """Checkpoint is missing tensors or their shapes disagree."""


class EmptyEvaluation(TrajsslError):
    """Evaluation was asked to run on zero scenarios."""


class ConfigError(TrajsslError):
    """Run configuration violates the published schema."""


class NumericalFault(TrajsslError):
    """A numerical operation produced NaN or Inf."""
