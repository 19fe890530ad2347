"""Exception types raised across the matching pipeline."""

from __future__ import annotations


class TrialMatchError(Exception):
    """Base class for all engine errors."""


# corpus
class MalformedXml(TrialMatchError):
    pass


class MissingIdentifier(TrialMatchError):
    pass


# patient
class MalformedJson(TrialMatchError):
    pass


class MissingSubjectId(TrialMatchError):
    pass


class AugmenterUnavailable(TrialMatchError):
    pass


class AugmenterMalformedOutput(TrialMatchError):
    pass


# index
class DuplicateDocId(TrialMatchError):
    pass


class UnknownDocId(TrialMatchError):
    pass


class DimensionMismatch(TrialMatchError):
    pass


class TextTooLong(TrialMatchError):
    pass


class IndexFinalized(TrialMatchError):
    """Raised when inserting into an index after finalize()."""


class IndexFormatError(TrialMatchError):
    """Raised when a persisted index segment is unreadable."""


# retrieve
class EmptyBundle(TrialMatchError):
    pass


# reasoner clients
class BackendUnavailable(TrialMatchError):
    pass


class Timeout(BackendUnavailable):
    pass


# rank
class JudgeUnavailable(TrialMatchError):
    pass


class ReasonerUnavailable(TrialMatchError):
    pass


class ReasonerMalformedOutput(TrialMatchError):
    pass


# eval
class MalformedLine(TrialMatchError):
    pass


class InvalidGrade(TrialMatchError):
    pass
