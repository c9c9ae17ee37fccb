"""Exception hierarchy shared across the toolkit.

Every error raised on a documented failure path derives from
:class:`SemkpError`, so callers can catch one base class at API and CLI
boundaries.
"""

from __future__ import annotations


class SemkpError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SemkpError):
    """A configuration value is out of range or inconsistent."""


class SchemaError(SemkpError):
    """Structured data does not match the documented schema."""


class IoError(SemkpError):
    """An artifact on disk is unreadable, truncated, or malformed."""


class MissingFile(IoError):
    """A referenced file path is absent."""


class DuplicateId(SchemaError):
    """Two records share an identifier that must be unique."""


class DegenerateCloud(SemkpError):
    """A point cloud has no spatial extent (all points coincide)."""


class DegenerateLabels(SemkpError):
    """A training batch lacks the label diversity the loss requires."""


class NoPositivePairs(SemkpError):
    """No semantic index is shared between any two models."""


class InsufficientModels(SemkpError):
    """An operation needs more models than the dataset provides."""


class PerplexityTooLarge(SemkpError):
    """t-SNE perplexity is too large for the number of samples."""


class EmptyConsensus(SemkpError):
    """Aggregation produced no clusters to report."""


class InvalidDecision(SemkpError):
    """A verification decision references unknown indices or conflicts."""


class NoKeypoints(SemkpError):
    """An evaluation batch contains no visible keypoints."""
