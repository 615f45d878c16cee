"""Failure taxonomy shared by the whole package.

Each class carries a stable machine-readable ``code`` (its class name) so
callers and the CLI can branch on failure kinds without parsing messages.
"""


class DualCPError(Exception):
    """Base class for all package errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# --- container / embedding set ---

class CorruptHeader(DualCPError):
    """File magic, version, or header fields are invalid."""


class Truncated(DualCPError):
    """File ends before the payload declared in the header."""


class LabelOutOfRange(DualCPError):
    """A class label or domain id exceeds the manifest's range."""


class NonFinite(DualCPError):
    """Features contain NaN or infinite values."""


class Empty(DualCPError):
    """A set with zero rows where at least one is required."""


class BadManifest(DualCPError):
    """Manifest metadata inconsistent with the payload or invalid."""


class ZeroVector(DualCPError):
    """A vector that must have positive norm is (numerically) zero."""


# --- prototype construction ---

class TooManyClassesForDim(DualCPError):
    """More columns than the feature dimension can hold orthogonally."""


class RankDeficient(DualCPError):
    """Input columns are linearly dependent; no orthonormal basis exists."""


class SingletonETF(DualCPError):
    """An equiangular frame over a single vector is undefined."""


class BadThreshold(DualCPError):
    """Similarity threshold outside (0, 1]."""


class MissingClass(DualCPError):
    """A class has no samples where at least one is required."""


# --- calibrator training ---

class DegenerateOutput(DualCPError):
    """Calibrator produced a (near-)zero vector that cannot be normalized."""


class Diverged(DualCPError):
    """Training loss became non-finite."""


class BadConfig(DualCPError):
    """Training configuration violates its invariants."""


# --- incremental protocol ---

class MissingDomain(DualCPError):
    """A domain expected by the protocol has no rows."""


class Undefined(DualCPError):
    """A metric that needs at least two domains was asked of one."""


# --- synthetic benchmark ---

class Infeasible(DualCPError):
    """Benchmark spec cannot satisfy its cosine margins in the given dim."""
