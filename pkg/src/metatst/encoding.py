"""Frozen text-encoder backends, token aggregation, modality alignment, and caching.

The text encoder is strictly frozen: identical text always yields an identical
word-token sequence, and no training step ever touches backend state. Trainable
pieces live downstream of it (optional router aggregation and the two-layer
alignment map), inside the forecasting model's parameter set.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import threading
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import AggregationStrategy
from .metadata import TEMPLATE_VERSION, MetadataBundle
from .tokens import TokenBlock

logger = logging.getLogger(__name__)

DIGEST_BYTES = 32


class EmbeddingServiceError(RuntimeError):
    """The embedding service failed; ``retryable`` marks transient failures."""

    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


@dataclass(frozen=True)
class WordTokenSequence:
    """Word-level vectors for one paragraph, optionally with a special-token index."""

    vectors: np.ndarray  # (n_words, dim) float32
    special_token: int | None = None

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError(f"expected a (n_words, dim) matrix with n_words >= 1, got {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise ValueError("word token vectors must be finite")
        if self.special_token is not None and not (0 <= self.special_token < self.vectors.shape[0]):
            raise ValueError(f"special_token index {self.special_token} out of range")

    @property
    def n_words(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


class HashStubBackend:
    """Hermetic test backend: one seeded pseudo-random unit vector per whitespace token.

    Each token's vector is keyed by a digest of its character trigrams, so equal
    tokens map to equal rows across processes and platforms. No network, no
    weights, no trainable state.
    """

    kind = "hash_stub"

    def __init__(self, dim: int = 64, ngram: int = 3):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.ngram = ngram
        self.model_id = f"hash_stub:d{dim}"
        self._token_cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _token_vector(self, token: str) -> np.ndarray:
        with self._lock:
            cached = self._token_cache.get(token)
        if cached is not None:
            return cached
        digest = hashlib.blake2b(digest_size=16)
        if len(token) < self.ngram:
            digest.update(token.encode("utf-8"))
        else:
            for i in range(len(token) - self.ngram + 1):
                digest.update(token[i:i + self.ngram].encode("utf-8"))
                digest.update(b"\x1f")
        seed = int.from_bytes(digest.digest()[:8], "little")
        vec = np.random.default_rng(seed).standard_normal(self.dim)
        norm = np.linalg.norm(vec)
        vec = (vec / norm).astype(np.float32)
        with self._lock:
            self._token_cache[token] = vec
        return vec

    def encode(self, texts: list[str]) -> list[WordTokenSequence]:
        out = []
        for text in texts:
            words = text.split()
            if not words:
                raise ValueError("cannot encode empty text")
            rows = np.stack([self._token_vector(w) for w in words])
            out.append(WordTokenSequence(vectors=rows))
        return out


class ServiceBackend:
    """Client for an external embedding service over the JSON wire protocol.

    Request: ``{"model": str, "texts": [str, ...]}`` (plus ``"layer"`` when a
    hidden-layer index is pinned for decoder-style models). Response: either
    ``{"dim": int, "token_embeddings": [[[f, ...], ...], ...]}`` with one word-level
    matrix per text, or ``{"dim": int, "embeddings": [[f, ...], ...]}`` when the
    server collapses word tokens itself. Collapsed responses are only accepted
    when ``precollapsed=True``; every aggregation strategy otherwise needs
    word-level vectors.
    """

    kind = "external_service"

    def __init__(
        self,
        url: str,
        model_id: str,
        dim: int | None = None,
        precollapsed: bool = False,
        special_token_index: int | None = None,
        layer_index: int | None = None,
        timeout: float = 30.0,
        max_retries: int = 3,
        retry_wait: float = 0.5,
        session=None,
    ):
        self.url = url
        self.model_id = model_id
        self.dim = dim
        self.precollapsed = precollapsed
        self.special_token_index = special_token_index
        self.layer_index = layer_index
        self.timeout = timeout
        self.max_retries = max_retries
        self.retry_wait = retry_wait
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def _post(self, payload: dict) -> dict:
        import requests

        last_exc: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = self._session.post(self.url, json=payload, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_exc = exc
                if attempt + 1 < self.max_retries:
                    time.sleep(self.retry_wait * (attempt + 1))
                continue
            if resp.status_code >= 500:
                last_exc = EmbeddingServiceError(
                    f"embedding service returned {resp.status_code}", retryable=True
                )
                if attempt + 1 < self.max_retries:
                    time.sleep(self.retry_wait * (attempt + 1))
                continue
            if resp.status_code != 200:
                raise EmbeddingServiceError(
                    f"embedding service returned {resp.status_code}: {resp.text[:200]}"
                )
            return resp.json()
        raise EmbeddingServiceError(
            f"embedding service unreachable after {self.max_retries} attempts: {last_exc}",
            retryable=True,
        )

    def encode(self, texts: list[str]) -> list[WordTokenSequence]:
        for text in texts:
            if not text.strip():
                raise ValueError("cannot encode empty text")
        payload: dict = {"model": self.model_id, "texts": list(texts)}
        if self.layer_index is not None:
            payload["layer"] = self.layer_index
        body = self._post(payload)
        dim = body.get("dim")
        if "token_embeddings" in body:
            matrices = body["token_embeddings"]
            if len(matrices) != len(texts):
                raise EmbeddingServiceError(
                    f"got {len(matrices)} token matrices for {len(texts)} texts"
                )
            out = []
            for mat in matrices:
                arr = np.asarray(mat, dtype=np.float32)
                if arr.ndim != 2:
                    raise EmbeddingServiceError(f"malformed token matrix of shape {arr.shape}")
                out.append(WordTokenSequence(vectors=arr, special_token=self.special_token_index))
        elif "embeddings" in body:
            if not self.precollapsed:
                raise EmbeddingServiceError(
                    "service returned collapsed embeddings but word-level mode is required; "
                    "set precollapsed=True only when server-side pooling is intended"
                )
            rows = np.asarray(body["embeddings"], dtype=np.float32)
            if rows.ndim != 2 or rows.shape[0] != len(texts):
                raise EmbeddingServiceError(f"malformed embeddings of shape {rows.shape}")
            out = [WordTokenSequence(vectors=row[None, :]) for row in rows]
        else:
            raise EmbeddingServiceError(
                f"response carries neither token_embeddings nor embeddings: {sorted(body)}"
            )
        observed = out[0].dim
        if dim is not None and dim != observed:
            raise EmbeddingServiceError(f"declared dim {dim} != observed dim {observed}")
        if self.dim is None:
            self.dim = observed
        elif self.dim != observed:
            raise EmbeddingServiceError(f"expected dim {self.dim}, service sent {observed}")
        return out


def encode_text(backend, text: str) -> WordTokenSequence:
    """Encode one paragraph with a frozen backend; empty text is an error."""
    if not text or not text.strip():
        raise ValueError("cannot encode empty text")
    return backend.encode([text])[0]


class RouterAggregator(nn.Module):
    """Learned router queries that pool word tokens through one cross-attention pass.

    Queries and keys are projected per head; values are the raw word vectors, so
    each router output is a convex combination of word tokens (coordinate-wise)
    and a single-word sequence aggregates to exactly that word. The global token
    is the mean over the router outputs.
    """

    def __init__(self, dim: int, router_count: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"dim={dim} not divisible by n_heads={n_heads}")
        self.dim = dim
        self.router_count = router_count
        self.n_heads = n_heads
        self.routers = nn.Parameter(torch.randn(router_count, dim) * 0.02)
        self.query_proj = nn.Linear(dim, dim)
        self.key_proj = nn.Linear(dim, dim)

    def forward(self, words: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """words: (batch, n_words, dim); mask: (batch, n_words) bool, True = valid."""
        batch, n_words, dim = words.shape
        head_dim = dim // self.n_heads
        queries = self.query_proj(self.routers)  # (R, dim)
        queries = queries.view(self.router_count, self.n_heads, head_dim).transpose(0, 1)
        keys = self.key_proj(words).view(batch, n_words, self.n_heads, head_dim).permute(0, 2, 1, 3)
        values = words.view(batch, n_words, self.n_heads, head_dim).permute(0, 2, 1, 3)
        scores = torch.einsum("hrd,bhwd->bhrw", queries, keys) / head_dim**0.5
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        pooled = torch.einsum("bhrw,bhwd->bhrd", weights, values)
        pooled = pooled.permute(0, 2, 1, 3).reshape(batch, self.router_count, dim)
        return pooled.mean(dim=1)


class ModalAlign(nn.Module):
    """Two-layer map from the text encoder's native width to the model width."""

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int | None = None,
                 activation: str = "gelu"):
        super().__init__()
        hidden_dim = out_dim if hidden_dim is None else hidden_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)
        if activation == "gelu":
            self.act = nn.GELU()
        elif activation == "identity":
            self.act = nn.Identity()
        else:
            raise ValueError(f"unknown activation {activation!r}")

    @classmethod
    def identity(cls, dim: int) -> "ModalAlign":
        """A pass-through configuration for tests: unit weights, zero bias, no gate."""
        align = cls(dim, dim, activation="identity")
        with torch.no_grad():
            align.fc1.weight.copy_(torch.eye(dim))
            align.fc1.bias.zero_()
            align.fc2.weight.copy_(torch.eye(dim))
            align.fc2.bias.zero_()
        return align

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


def aggregate(
    seq: WordTokenSequence,
    strategy: AggregationStrategy,
    router: RouterAggregator | None = None,
) -> np.ndarray:
    """Collapse a word-token sequence into one native-width vector.

    average_pooling takes the arithmetic mean of the rows; special_token picks
    the marked row; router runs the trainable cross-attention pass (gradient-free
    here; the model applies the same module differentiably during training).
    """
    if strategy.kind == "average_pooling":
        return seq.vectors.mean(axis=0)
    if strategy.kind == "special_token":
        if seq.special_token is None:
            raise ValueError("special_token aggregation requires a special-token index")
        return seq.vectors[seq.special_token].copy()
    if strategy.kind == "router":
        if router is None:
            raise ValueError("router aggregation requires an initialized RouterAggregator")
        with torch.no_grad():
            words = torch.from_numpy(np.ascontiguousarray(seq.vectors)).unsqueeze(0)
            out = router(words.to(next(router.parameters()).dtype))
        return out.squeeze(0).numpy().astype(np.float32)
    raise ValueError(f"unknown aggregation kind {strategy.kind!r}")


def cache_key(model_id: str, template_version: str, text: str) -> bytes:
    """Content digest identifying one (backend, template revision, paragraph) triple."""
    h = hashlib.sha256()
    for part in (model_id, template_version, text):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.digest()


class EmbeddingCache:
    """Append-only persistent map from text digest to aggregated native vector.

    Record layout: 32-byte digest, 4-byte little-endian dimension, then that many
    little-endian float32 values. A truncated or garbled tail is dropped with a
    warning; the latest record for a digest wins. Reads are lock-free after load,
    writes are serialized.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[bytes, np.ndarray] = {}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        data = self.path.read_bytes()
        offset = 0
        entries = {}
        valid_end = 0
        while offset < len(data):
            if offset + DIGEST_BYTES + 4 > len(data):
                break
            digest = data[offset:offset + DIGEST_BYTES]
            (dim,) = struct.unpack_from("<I", data, offset + DIGEST_BYTES)
            body_start = offset + DIGEST_BYTES + 4
            body_end = body_start + 4 * dim
            if dim == 0 or body_end > len(data):
                break
            vec = np.frombuffer(data[body_start:body_end], dtype="<f4").copy()
            entries[digest] = vec
            offset = body_end
            valid_end = offset
        if valid_end != len(data):
            warnings.warn(
                f"embedding cache {self.path} corrupt after byte {valid_end}; "
                f"dropping {len(data) - valid_end} trailing bytes"
            )
            with self._lock:
                with self.path.open("r+b") as fh:
                    fh.truncate(valid_end)
        self._entries = entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, digest: bytes) -> np.ndarray | None:
        vec = self._entries.get(digest)
        return None if vec is None else vec.copy()

    def put(self, digest: bytes, vector: np.ndarray) -> None:
        if len(digest) != DIGEST_BYTES:
            raise ValueError(f"digest must be {DIGEST_BYTES} bytes")
        vec = np.ascontiguousarray(vector, dtype="<f4").ravel()
        record = digest + struct.pack("<I", vec.size) + vec.tobytes()
        with self._lock:
            with self.path.open("ab") as fh:
                fh.write(record)
            self._entries[digest] = vec.copy()


class MetaEmbedder:
    """Turns rendered metadata paragraphs into native-width vectors, cache first.

    For parameter-free aggregation the aggregated vector is persisted. The router
    strategy is trainable, so only the frozen word-token sequences are memoized
    (in process) and aggregation happens inside the model where gradients flow.
    """

    def __init__(
        self,
        backend,
        strategy: AggregationStrategy | None = None,
        cache: EmbeddingCache | None = None,
        template_version: str = TEMPLATE_VERSION,
    ):
        self.backend = backend
        self.strategy = strategy if strategy is not None else AggregationStrategy()
        self.cache = cache
        self.template_version = template_version
        self._word_memo: dict[bytes, WordTokenSequence] = {}

    @property
    def dim(self) -> int:
        if self.backend.dim is None:
            raise RuntimeError("backend native dimension unknown before the first encode call")
        return self.backend.dim

    def _key(self, text: str) -> bytes:
        return cache_key(self.backend.model_id, self.template_version, text)

    def word_sequence(self, text: str) -> WordTokenSequence:
        key = self._key(text)
        seq = self._word_memo.get(key)
        if seq is None:
            seq = encode_text(self.backend, text)
            self._word_memo[key] = seq
        return seq

    def aggregated_vector(self, text: str) -> np.ndarray:
        if self.strategy.trainable:
            raise RuntimeError(
                "router aggregation is trainable; use word_sequence() and aggregate in-model"
            )
        key = self._key(text)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                if hit.size == self.backend.dim or self.backend.dim is None:
                    return hit
                warnings.warn(
                    f"cached vector of dim {hit.size} does not match backend dim "
                    f"{self.backend.dim}; recomputing"
                )
        vec = aggregate(self.word_sequence(text), self.strategy).astype(np.float32)
        if self.cache is not None:
            self.cache.put(key, vec)
        return vec

    def aggregated(self, texts: list[str]) -> np.ndarray:
        return np.stack([self.aggregated_vector(t) for t in texts])

    def bundle_vectors(self, bundle: MetadataBundle) -> np.ndarray:
        """(3, dim) aggregated vectors in fixed (dataset, task, sample) order."""
        return self.aggregated(list(bundle.texts))

    def bundle_word_sequences(self, bundle: MetadataBundle) -> list[WordTokenSequence]:
        return [self.word_sequence(t) for t in bundle.texts]


def meta_embed(
    bundle: MetadataBundle,
    backend,
    strategy: AggregationStrategy,
    align: ModalAlign,
    cache: EmbeddingCache | None = None,
    router: RouterAggregator | None = None,
) -> TokenBlock:
    """Encode one metadata bundle into three aligned model-width tokens."""
    embedder = MetaEmbedder(backend, strategy, cache)
    if strategy.trainable:
        if router is None:
            raise ValueError("router aggregation requires an initialized RouterAggregator")
        native = np.stack(
            [aggregate(seq, strategy, router) for seq in embedder.bundle_word_sequences(bundle)]
        )
    else:
        native = embedder.bundle_vectors(bundle)
    with torch.no_grad():
        dtype = next(align.parameters()).dtype
        aligned = align(torch.from_numpy(native).to(dtype)).numpy().astype(np.float32)
    return TokenBlock(tokens=aligned, segments=("meta",) * aligned.shape[0])
