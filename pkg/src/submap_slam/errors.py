"""Exception types shared across the pipeline modules."""


class SubmapSlamError(Exception):
    """Base class for all package-specific failures."""


class LogDomainError(SubmapSlamError):
    """Logarithm requested at a rotation angle of pi (not unique)."""


class TooFewCorrespondences(SubmapSlamError):
    """Fewer correspondences than the solver's minimal sample."""


class NoConsensus(SubmapSlamError):
    """RANSAC found no model with enough inliers."""


class DegenerateConfiguration(SubmapSlamError):
    """Point configuration is rank-deficient (collinear/coincident)."""


class AllZeroConfidence(SubmapSlamError):
    """Confidence normalization needs at least one positive entry."""


class DisconnectedGraph(SubmapSlamError):
    """Sequential edges do not form a path covering all nodes."""


class SingularSystem(SubmapSlamError):
    """Normal equations are rank-deficient beyond the gauge."""


class UnknownFrame(SubmapSlamError):
    """Backend was asked about a frame outside the active sequence."""


class BatchTooSmall(SubmapSlamError):
    """Decoder needs at least two keyframe embeddings."""


class BatchTooLarge(SubmapSlamError):
    """Decoder batch exceeds the backend's declared maximum."""


class MissingEmbedding(SubmapSlamError):
    """A keyframe marked old has no stored embedding in the database."""


class NoSharedKeyframes(SubmapSlamError):
    """Submap registration found no overlap with existing submaps."""


class TooFewAssociations(SubmapSlamError):
    """Trajectory association produced fewer than the required pairs."""


class EmptyCloud(SubmapSlamError):
    """Cloud metrics need non-empty point sets on both sides."""


class ConfigError(SubmapSlamError):
    """Configuration file failed to parse or validate."""
