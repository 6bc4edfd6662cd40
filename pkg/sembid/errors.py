"""Exception hierarchy shared by the sembid modules."""

from __future__ import annotations


class SembidError(Exception):
    """Base class for every error raised deliberately by sembid."""


class ConfigurationError(SembidError, ValueError):
    """A configuration value violates its documented contract."""


class DomainError(SembidError, ValueError):
    """An operation received an argument outside its domain."""


class EpisodeStateError(SembidError, RuntimeError):
    """The auction episode is not in a state that allows the request."""


class GraphStateError(SembidError, RuntimeError):
    """The autograd graph was already consumed by a backward pass."""


class ContainerFormatError(SembidError, ValueError):
    """A binary container (dataset, embedding cache, checkpoint) could not be parsed."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CacheMissError(SembidError, KeyError):
    """Strict embedding cache lookup for a text that is not cached."""


class DataIntegrityError(SembidError):
    """Stored artefacts disagree with each other or with their schema."""
