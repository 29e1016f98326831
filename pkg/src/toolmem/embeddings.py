"""Text embedding providers and cosine similarity.

Two providers share one contract (``embed(text) -> np.ndarray``):

* ``HashingEmbedder`` - deterministic hashed bag of word unigrams and
  character trigrams. No model download, identical output on every platform.
* ``RemoteEmbedder`` - POSTs to an OpenAI-style ``/embeddings`` endpoint.

Non-empty text yields a unit vector; text with no features yields the zero
vector of the provider's dimension.
"""

from __future__ import annotations

import functools
import logging
import math
import os
import re
import threading
from typing import Protocol

import httpx
import numpy as np

from .errors import DimensionMismatch, ProviderUnavailable, ZeroVector

logger = logging.getLogger(__name__)

FNV_OFFSET = 0x811C9DC5
FNV_PRIME = 0x01000193
_WORD_RE = re.compile(r"\w+", re.UNICODE)


class Embedder(Protocol):
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


@functools.lru_cache(maxsize=65536)
def fnv1a_32(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFF
    return h


def _features(text: str) -> list[str]:
    words = _WORD_RE.findall(text.casefold())
    feats = [f"w:{w}" for w in words]
    for w in words:
        padded = f"#{w}#"
        feats.extend(f"c:{padded[i:i + 3]}" for i in range(len(padded) - 2))
    return feats


def _unit(counts: np.ndarray) -> np.ndarray:
    # counts are small integers, so any summation order gives the exact sum of squares
    norm = math.sqrt(float(np.dot(counts, counts)))
    if norm == 0.0:
        return np.zeros_like(counts, dtype=np.float64)
    return counts.astype(np.float64) / norm


class HashingEmbedder:
    """Hashed unigram + character-trigram counts, L2-normalized."""

    def __init__(self, dimension: int = 256):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        counts = np.zeros(self.dimension, dtype=np.float64)
        for feat in _features(text):
            counts[fnv1a_32(feat.encode("utf-8")) % self.dimension] += 1.0
        return _unit(counts)


class RemoteEmbedder:
    """Client for a JSON embedding endpoint (``{"model", "input"}`` in, ``data[].embedding`` out).

    Vectors are cached per text, which also keeps repeated calls bitwise
    identical for the lifetime of the instance.
    """

    def __init__(
        self,
        endpoint_url: str,
        model_name: str = "all-MiniLM-L6-v2",
        api_key_env: str = "TAMEM_API_KEY",
        timeout_s: float = 30.0,
        max_retries: int = 3,
        client: httpx.Client | None = None,
    ):
        self.endpoint_url = endpoint_url
        self.model_name = model_name
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self._client = client or httpx.Client(timeout=timeout_s)
        self._lock = threading.Lock()
        self._cache: dict[str, np.ndarray] = {}
        self.dimension = 0

    def _request(self, texts: list[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {"model": self.model_name, "input": texts}
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._client.post(self.endpoint_url, json=payload, headers=headers)
                resp.raise_for_status()
                data = resp.json()["data"]
                return [row["embedding"] for row in sorted(data, key=lambda r: r.get("index", 0))]
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last = exc
                logger.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
        raise ProviderUnavailable(f"embedding endpoint {self.endpoint_url} failed: {last}")

    def embed(self, text: str) -> np.ndarray:
        with self._lock:
            if text in self._cache:
                return self._cache[text]
            if not text.strip():
                if not self.dimension:
                    # learn the dimension from a probe so zero vectors have the right shape
                    self.dimension = len(self._request(["dimension probe"])[0])
                vec = np.zeros(self.dimension, dtype=np.float64)
            else:
                raw = np.asarray(self._request([text])[0], dtype=np.float64)
                if self.dimension and raw.shape[0] != self.dimension:
                    raise DimensionMismatch(
                        f"endpoint returned dimension {raw.shape[0]}, expected {self.dimension}"
                    )
                self.dimension = raw.shape[0]
                norm = float(np.linalg.norm(raw))
                vec = raw / norm if norm > 0 else np.zeros_like(raw)
            self._cache[text] = vec
            return vec


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``.

    Uses exactly-rounded sums, so the result does not depend on argument order.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = math.sqrt(math.fsum((a * a).tolist()))
    nb = math.sqrt(math.fsum((b * b).tolist()))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    dot = math.fsum((a * b).tolist())
    return max(-1.0, min(1.0, dot / (na * nb)))


def make_embedder(kind: str, **kwargs) -> Embedder:
    if kind == "local":
        return HashingEmbedder(kwargs.get("dimension", 256))
    if kind == "remote":
        return RemoteEmbedder(**kwargs)
    raise ValueError(f"unknown embedder {kind!r}")
