"""Embedding providers shared by BERTScore and the retrieval index.

Wire contract (JSON over HTTP): request ``{"input": [str, ...]}``, response
``{"data": [{"embedding": [float, ...]}, ...]}`` in request order.
"""
from __future__ import annotations

import hashlib
import logging
import time
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import requests

log = logging.getLogger(__name__)


class EmbeddingError(RuntimeError):
    pass


@runtime_checkable
class EmbeddingProvider(Protocol):
    model_id: str

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return a ``(len(texts), dim)`` array."""
        ...


class HashingEmbedder:
    """Deterministic offline embedder: signed feature hashing of character
    n-grams. Useful when no embedding service is available and in tests;
    it captures surface similarity only."""

    def __init__(self, dim: int = 256, ngram: int = 3):
        self.dim = dim
        self.ngram = ngram
        self.model_id = f"hashing-char{ngram}-v1/dim={dim}"
        self.max_in_flight = 0  # unlimited

    def _vector(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.float64)
        padded = f"#{text.lower()}#"
        grams = [padded[i : i + self.ngram] for i in range(max(1, len(padded) - self.ngram + 1))]
        for g in grams:
            h = int.from_bytes(hashlib.blake2b(g.encode("utf-8"), digest_size=8).digest(), "little")
            v[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        return v

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self._vector(t) for t in texts])


class HttpEmbeddingProvider:
    def __init__(
        self,
        url: str,
        model: str | None = None,
        *,
        batch_size: int = 64,
        timeout_s: float = 60.0,
        max_attempts: int = 4,
        max_in_flight: int = 1,
        session: requests.Session | None = None,
    ):
        self.url = url
        self.model = model
        self.model_id = model or url
        self.batch_size = batch_size
        self.timeout_s = timeout_s
        self.max_attempts = max_attempts
        self.max_in_flight = max_in_flight
        self.dim: int | None = None
        self.session = session or requests.Session()

    def _post(self, batch: list[str]) -> list[list[float]]:
        payload: dict = {"input": batch}
        if self.model:
            payload["model"] = self.model
        delay = 0.5
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self.session.post(self.url, json=payload, timeout=self.timeout_s)
            except (requests.ConnectionError, requests.Timeout) as exc:
                err: Exception = exc
            else:
                if resp.status_code < 400:
                    try:
                        data = resp.json()["data"]
                        return [row["embedding"] for row in data]
                    except (ValueError, KeyError, TypeError) as exc:
                        raise EmbeddingError(f"malformed embedding response: {exc}") from None
                if resp.status_code != 429 and resp.status_code < 500:
                    raise EmbeddingError(f"embedding request failed: HTTP {resp.status_code}")
                err = EmbeddingError(f"HTTP {resp.status_code}")
            if attempt == self.max_attempts:
                raise EmbeddingError(f"embedding request failed after {attempt} attempts: {err}")
            log.warning("embedding request attempt %d failed (%s); retrying", attempt, err)
            time.sleep(delay)
            delay *= 2
        raise AssertionError("unreachable")

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows: list[list[float]] = []
        for start in range(0, len(texts), self.batch_size):
            batch = list(texts[start : start + self.batch_size])
            vectors = self._post(batch)
            if len(vectors) != len(batch):
                raise EmbeddingError(f"asked for {len(batch)} embeddings, got {len(vectors)}")
            for v in vectors:
                if self.dim is None:
                    self.dim = len(v)
                elif len(v) != self.dim:
                    raise EmbeddingError(f"embedding dimension drifted from {self.dim} to {len(v)}")
            rows.extend(vectors)
        if not rows:
            return np.zeros((0, self.dim or 0))
        return np.asarray(rows, dtype=np.float64)


class CachedEmbedder:
    """Memoise per-string embeddings (BERTScore embeds the same tokens often)."""

    def __init__(self, inner: EmbeddingProvider, max_entries: int = 200_000):
        self.inner = inner
        self.model_id = inner.model_id
        self.max_in_flight = getattr(inner, "max_in_flight", 1)
        self._cache: dict[str, np.ndarray] = {}
        self.max_entries = max_entries

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        missing = list(dict.fromkeys(t for t in texts if t not in self._cache))
        if missing:
            vectors = self.inner.embed(missing)
            if len(self._cache) + len(missing) > self.max_entries:
                self._cache.clear()
            for t, v in zip(missing, vectors):
                self._cache[t] = np.asarray(v, dtype=np.float64)
        if not texts:
            return np.zeros((0, 0))
        return np.stack([self._cache[t] if t in self._cache else self.inner.embed([t])[0] for t in texts])
