"""Exception types shared across the package.

Every error raised deliberately by this package derives from
:class:`MMGalleryError`, so callers (and the CLI) can distinguish pipeline
failures from programming errors.
"""

from __future__ import annotations


class MMGalleryError(Exception):
    """Base class for all errors raised by this package."""


# --- vectors and encoders ---------------------------------------------------


class InvalidVector(MMGalleryError):
    """Vector is empty or contains non-finite values."""


class ZeroVector(MMGalleryError):
    """Vector with zero L2 norm cannot be normalized."""


class EmptyText(MMGalleryError):
    """Text encoder received an empty string."""


class ContentUnresolvable(MMGalleryError):
    """Content reference does not resolve to any known item."""


class BackendUnavailable(MMGalleryError):
    """Remote backend failed after bounded retries, or rejected the request."""


class DimensionMismatch(MMGalleryError):
    """Vector dimensionality disagrees with what the consumer expects."""


# --- reference selection ----------------------------------------------------


class NoEligibleClasses(MMGalleryError):
    """Every candidate class was excluded from reference selection."""


# --- captioning -------------------------------------------------------------


class TemplateError(MMGalleryError):
    """Prompt template has an unbound placeholder at render time."""


class ParseFailure(MMGalleryError):
    """Backend response has no recognizable list structure."""


class RegionCountMismatch(MMGalleryError):
    """Region discovery returned the wrong number of names after a reprompt."""


class EmptyResponse(MMGalleryError):
    """Backend returned empty or whitespace-only text."""


class CacheInvalid(MMGalleryError):
    """Description cache file contains an unreadable record."""


# --- gallery ----------------------------------------------------------------


class DuplicateSampleId(MMGalleryError):
    """Two gallery entries share a sample id."""


class ClassAlreadyPresent(MMGalleryError):
    """Incremental insertion attempted for a class the gallery already holds."""


class GalleryNotFound(MMGalleryError):
    """Gallery file does not exist."""


class GalleryFormatError(MMGalleryError):
    """Gallery file metadata or entry records are malformed."""


class VersionMismatch(MMGalleryError):
    """Gallery file was written by an unsupported format version."""


class ChecksumMismatch(MMGalleryError):
    """Gallery file content does not match its recorded checksum."""


class TruncatedFile(MMGalleryError):
    """Gallery file ends before the recorded number of entries."""


class EmptyGallery(MMGalleryError):
    """Classification requires at least one gallery entry."""


# --- synthetic worlds -------------------------------------------------------


class InvalidConfig(MMGalleryError):
    """Configuration values are out of range or mutually inconsistent."""


class UnknownSample(MMGalleryError):
    """Sample id is not part of the synthetic world."""


# --- evaluation harness -----------------------------------------------------


class EmptyManifest(MMGalleryError):
    """Manifest has no usable records for the requested split."""


class EmptyTestSplit(MMGalleryError):
    """Evaluation requires a non-empty test split."""


class InvalidParameterValue(MMGalleryError):
    """Sweep or experiment parameter is outside its legal range."""
