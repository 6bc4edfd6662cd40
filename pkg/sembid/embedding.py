"""Text encoders, the embedding cache container and the frozen random up-projection."""

from __future__ import annotations

import hashlib
import logging
import struct
import threading
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np
from sklearn.feature_extraction.text import HashingVectorizer

from .auction_env import named_rng
from .errors import CacheMissError, ConfigurationError, ContainerFormatError, DomainError

logger = logging.getLogger(__name__)

DEFAULT_ENCODER_DIM = 896
DEFAULT_PROJECTED_DIM = 2048

CACHE_MAGIC = b"SBEC"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHII")
_RECORD_LENGTH = struct.Struct("<I")


@dataclass(frozen=True)
class EmbeddingVector:
    """Dense embedding of one text and where it came from."""

    values: np.ndarray
    source: str = "hash"

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 1:
            raise DomainError("embedding vectors are one-dimensional")
        if not np.all(np.isfinite(values)):
            raise DomainError("embedding vectors must be finite")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


class TextEncoder(Protocol):
    dim: int

    def encode(self, text: str) -> EmbeddingVector: ...


class HashEncoder:
    """Signed feature hashing of lowercase alphanumeric tokens, L2-normalized."""

    def __init__(self, dim: int = DEFAULT_ENCODER_DIM) -> None:
        if dim < 1:
            raise ConfigurationError("encoder dimension must be positive")
        self.dim = dim
        self._vectorizer = HashingVectorizer(
            n_features=dim,
            lowercase=True,
            token_pattern=r"[0-9a-z]+",
            alternate_sign=True,
            norm="l2",
        )

    def encode(self, text: str) -> EmbeddingVector:
        if not text or not text.strip():
            raise DomainError("cannot encode empty text")
        row = self._vectorizer.transform([text]).toarray()[0].astype(np.float64)
        if not np.any(row):
            # no tokens survived (punctuation only, or cancelling signs): one bucket keyed by the raw text
            digest = int.from_bytes(hashlib.sha256(text.strip().encode("utf8")).digest()[:8], "little")
            row[digest % self.dim] = 1.0 if (digest >> 63) & 1 == 0 else -1.0
        return EmbeddingVector(row, source="hash")


def encode_text(text: str, dim: int = DEFAULT_ENCODER_DIM) -> EmbeddingVector:
    return HashEncoder(dim).encode(text)


# ----------------------------------------------------------------------
# Embedding cache container
# ----------------------------------------------------------------------
@dataclass
class EmbeddingCache:
    """Externally computed embeddings keyed by exact text."""

    dim: int
    vectors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, text: object) -> bool:
        return text in self.vectors

    def lookup(self, text: str) -> EmbeddingVector:
        try:
            return EmbeddingVector(self.vectors[text], source="cached")
        except KeyError:
            raise CacheMissError(text) from None


def write_embedding_cache(path: str | Path, entries: Mapping[str, Sequence[float]], dim: Optional[int] = None) -> Path:
    """Write *entries* in the cache container format, vectors as little-endian float32."""

    path = Path(path)
    arrays = {text: np.asarray(vector, dtype="<f4") for text, vector in entries.items()}
    if dim is None:
        dim = next(iter(arrays.values())).shape[0] if arrays else DEFAULT_ENCODER_DIM
    chunks = [_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, dim, len(arrays))]
    for text, vector in arrays.items():
        if vector.shape != (dim,):
            raise DomainError(f"vector for {text!r} has shape {vector.shape}, expected ({dim},)")
        encoded = text.encode("utf8")
        chunks.append(_RECORD_LENGTH.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(vector.tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


def parse_embedding_cache(payload: bytes, expected_dim: Optional[int] = None) -> EmbeddingCache:
    if len(payload) < _CACHE_HEADER.size:
        raise ContainerFormatError("truncated cache header", len(payload))
    magic, version, dim, count = _CACHE_HEADER.unpack_from(payload, 0)
    if magic != CACHE_MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}", 0)
    if version != CACHE_VERSION:
        raise ContainerFormatError(f"unsupported cache version {version}", 4)
    if dim == 0:
        raise ContainerFormatError("cache dimension must be positive", 6)
    if expected_dim is not None and dim != expected_dim:
        raise ConfigurationError(f"cache dimension {dim} does not match the encoder dimension {expected_dim}")

    vector_bytes = 4 * dim
    offset = _CACHE_HEADER.size
    vectors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        start = offset
        if offset + _RECORD_LENGTH.size > len(payload):
            raise ContainerFormatError("truncated record length", start)
        (length,) = _RECORD_LENGTH.unpack_from(payload, offset)
        offset += _RECORD_LENGTH.size
        if offset + length + vector_bytes > len(payload):
            raise ContainerFormatError("truncated record", start)
        try:
            text = payload[offset : offset + length].decode("utf8")
        except UnicodeDecodeError as exc:
            raise ContainerFormatError("record text is not valid UTF-8", offset + exc.start) from None
        offset += length
        vector = np.frombuffer(payload, dtype="<f4", count=dim, offset=offset).copy()
        if not np.all(np.isfinite(vector)):
            raise ContainerFormatError("non-finite vector entry", offset)
        offset += vector_bytes
        if text in vectors:
            raise ContainerFormatError(f"duplicate text {text!r}", start)
        vectors[text] = vector
    if offset != len(payload):
        raise ContainerFormatError("trailing bytes after the last record", offset)
    return EmbeddingCache(dim=dim, vectors=vectors)


def load_embedding_cache(path: str | Path, expected_dim: Optional[int] = None) -> EmbeddingCache:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Embedding cache not found: {path}")
    cache = parse_embedding_cache(path.read_bytes(), expected_dim)
    logger.info("loaded %d cached embeddings (dim %d) from %s", len(cache), cache.dim, path)
    return cache


class CachedEncoder:
    """Serve cached embeddings; permissive mode falls back to hashing on a miss."""

    def __init__(self, cache: EmbeddingCache, *, strict: bool = True) -> None:
        self.cache = cache
        self.dim = cache.dim
        self.strict = strict
        self._fallback = HashEncoder(cache.dim)

    def encode(self, text: str) -> EmbeddingVector:
        if not text or not text.strip():
            raise DomainError("cannot encode empty text")
        if text in self.cache:
            return self.cache.lookup(text)
        if self.strict:
            raise CacheMissError(text)
        logger.warning("embedding cache miss, hashing instead: %r", text[:80])
        return self._fallback.encode(text)


def build_encoder(spec: str = "hash", *, dim: int = DEFAULT_ENCODER_DIM, strict: bool = True) -> TextEncoder:
    """Encoder from a CLI spec: ``hash`` or ``cache:<path>``."""

    if spec == "hash":
        return HashEncoder(dim)
    if spec.startswith("cache:"):
        return CachedEncoder(load_embedding_cache(spec[len("cache:") :], expected_dim=dim), strict=strict)
    raise ConfigurationError(f"Unknown encoder {spec!r}; use 'hash' or 'cache:<path>'")


# ----------------------------------------------------------------------
# Projection
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class ProjectionSpec:
    """Frozen random linear map from encoder width to model semantic width."""

    in_dim: int = DEFAULT_ENCODER_DIM
    out_dim: int = DEFAULT_PROJECTED_DIM
    seed: int = 0

    def __post_init__(self) -> None:
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigurationError("projection dimensions must be positive")

    @cached_property
    def matrix(self) -> np.ndarray:
        rng = named_rng(self.seed, "projection", self.in_dim, self.out_dim)
        matrix = rng.standard_normal((self.out_dim, self.in_dim)) / np.sqrt(self.in_dim)
        matrix.setflags(write=False)
        return matrix

    @property
    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes()).hexdigest()

    def to_dict(self) -> dict:
        return {"in_dim": self.in_dim, "out_dim": self.out_dim, "seed": self.seed, "checksum": self.checksum}


def project(vector: EmbeddingVector | np.ndarray, spec: ProjectionSpec) -> EmbeddingVector:
    values = vector.values if isinstance(vector, EmbeddingVector) else np.asarray(vector, dtype=np.float64)
    source = vector.source if isinstance(vector, EmbeddingVector) else "hash"
    if values.shape != (spec.in_dim,):
        raise DomainError(f"expected a vector of dim {spec.in_dim}, got shape {values.shape}")
    return EmbeddingVector(spec.matrix @ values.astype(np.float64), source=source)


class SemanticEmbedder:
    """Encode then project texts, memoizing by exact text."""

    def __init__(self, encoder: Optional[TextEncoder] = None, projection: Optional[ProjectionSpec] = None) -> None:
        self.encoder = encoder or HashEncoder()
        self.projection = projection or ProjectionSpec(in_dim=self.encoder.dim)
        if self.projection.in_dim != self.encoder.dim:
            raise ConfigurationError(
                f"projection expects dim {self.projection.in_dim}, encoder produces {self.encoder.dim}"
            )
        self._memo: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self.projection.out_dim

    def embed(self, text: str) -> np.ndarray:
        cached = self._memo.get(text)
        if cached is not None:
            return cached
        vector = project(self.encoder.encode(text), self.projection).values
        with self._lock:
            self._memo.setdefault(text, vector)
        return vector

    def embed_many(self, texts: Iterable[str]) -> np.ndarray:
        rows = [self.embed(text) for text in texts]
        if not rows:
            return np.zeros((0, self.dim))
        return np.vstack(rows)

    def encode_raw(self, texts: Iterable[str]) -> np.ndarray:
        """Encoder outputs without projection."""

        rows = [self.encoder.encode(text).values for text in texts]
        return np.vstack(rows) if rows else np.zeros((0, self.encoder.dim))


def shuffle_pairings(texts: Sequence[str], vectors: np.ndarray, seed: int) -> np.ndarray:
    """Break the text/embedding correspondence with a seeded permutation of *vectors*."""

    vectors = np.asarray(vectors)
    if len(texts) != vectors.shape[0]:
        raise DomainError(f"{len(texts)} texts but {vectors.shape[0]} vectors")
    permutation = named_rng(seed, "shuffle_pairings").permutation(vectors.shape[0])
    return vectors[permutation]
