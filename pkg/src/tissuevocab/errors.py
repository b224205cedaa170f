"""Typed errors raised across the package.

Everything derives from :class:`TissueVocabError`, so callers (the CLI in
particular) can separate user-facing failures from programming errors.
"""

from __future__ import annotations


class TissueVocabError(Exception):
    """Base class for all package errors."""


# -- file formats -----------------------------------------------------------

class CorruptFile(TissueVocabError, ValueError):
    """A binary container could not be decoded."""


class BadMagic(CorruptFile):
    pass


class TruncatedFile(CorruptFile):
    pass


class NonFiniteData(CorruptFile):
    pass


class DimOverflow(CorruptFile):
    pass


class InvalidHeader(CorruptFile):
    pass


class ChecksumMismatch(CorruptFile):
    pass


class VersionMismatch(CorruptFile):
    pass


class IoFailure(TissueVocabError, OSError):
    pass


# -- sampling ---------------------------------------------------------------

class MaskTooSmall(TissueVocabError, ValueError):
    pass


class BadPatchSize(TissueVocabError, ValueError):
    pass


# -- network / training -----------------------------------------------------

class ShapeMismatch(TissueVocabError, ValueError):
    pass


class GraphNotBuilt(TissueVocabError, RuntimeError):
    pass


class DivergenceDetected(TissueVocabError, FloatingPointError):
    pass


class TooFewSamples(TissueVocabError, ValueError):
    pass


class EmptyClusterUnrecoverable(TissueVocabError, RuntimeError):
    pass


# -- signatures -------------------------------------------------------------

class SequenceMismatch(TissueVocabError, ValueError):
    pass


class EmptyMap(TissueVocabError, ValueError):
    pass


class MissingSequence(TissueVocabError, KeyError):
    pass


class DuplicateSequence(TissueVocabError, ValueError):
    pass


class MissingTransform(TissueVocabError, KeyError):
    pass


# -- learners / stats -------------------------------------------------------

class DegenerateLabels(TissueVocabError, ValueError):
    pass


class EmptyFeatures(TissueVocabError, ValueError):
    pass


class FewerThanTwoPoints(TissueVocabError, ValueError):
    pass


class TooManyClusters(TissueVocabError, ValueError):
    pass


class DegenerateVariance(TissueVocabError, ValueError):
    pass


class EmptyGroup(TissueVocabError, ValueError):
    pass


# -- longitudinal -----------------------------------------------------------

class LayoutMismatch(TissueVocabError, ValueError):
    pass


class NoOverlap(TissueVocabError, ValueError):
    pass


class DidNotConverge(TissueVocabError, RuntimeError):
    pass


class CodebookMismatch(TissueVocabError, ValueError):
    pass


# -- synthetic cohort / cli -------------------------------------------------

class SpecInvalid(TissueVocabError, ValueError):
    pass


class ConfigInvalid(TissueVocabError, ValueError):
    pass


class MissingArtifact(TissueVocabError, FileNotFoundError):
    pass
