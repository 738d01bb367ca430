"""Semantic-guided attention fusion and the text-embedding provider behind it."""

from __future__ import annotations

import hashlib
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .numerics import (
    ShapeError,
    Tensor,
    add,
    add_n,
    constant,
    hstack,
    matmul,
    mul_col,
    row_softmax,
    scaled_dot,
    take_col,
    take_row,
)

logger = logging.getLogger(__name__)

D_LLM = 768


class EmbeddingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SemanticEmbedding:
    vector: np.ndarray
    source_text: str

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.shape != (D_LLM,) or not np.all(np.isfinite(v)):
            raise EmbeddingError(f"semantic embedding must be {D_LLM} finite values, got shape {v.shape}")
        object.__setattr__(self, "vector", v)


def hash_unit_vector(text: str, dim: int = D_LLM) -> np.ndarray:
    """Unit vector from SHA-256 in counter mode fed through Box-Muller; platform independent."""
    need = dim + (dim % 2)
    raw = bytearray()
    counter = 0
    seed = text.encode("utf-8")
    while len(raw) < need * 8:
        raw += hashlib.sha256(seed + counter.to_bytes(8, "little")).digest()
        counter += 1
    u = np.frombuffer(bytes(raw[: need * 8]), dtype="<u8").astype(np.float64)
    u = (u + 0.5) / 2.0**64
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:dim]
    return z / np.linalg.norm(z)


class EmbeddingProvider:
    """Text to 768-d vectors, either from a remote HTTP endpoint or a hash-seeded fallback.

    Remote contract: ``POST {"model": ..., "input": [texts]}`` returning either
    ``{"embeddings": [[...], ...]}`` or ``{"data": [{"embedding": [...]}, ...]}``.
    Vectors are cached on disk as raw float64 keyed by a hash of mode, model and text.
    """

    def __init__(
        self,
        mode: str = "fallback",
        endpoint: str | None = None,
        model: str | None = None,
        api_key: str | None = None,
        cache_dir: str | Path | None = None,
        retries: int = 3,
        timeout: float = 30.0,
        backoff: float = 0.5,
    ):
        if mode not in ("remote", "fallback"):
            raise ValueError(f"unknown embedding mode {mode!r}")
        if mode == "remote" and not endpoint:
            raise ValueError("remote embedding mode needs an endpoint")
        self.mode = mode
        self.endpoint = endpoint
        self.model = model or ""
        self.api_key = api_key
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.retries = retries
        self.timeout = timeout
        self.backoff = backoff
        self._memo: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_env(cls, cache_dir: str | Path | None = None) -> "EmbeddingProvider":
        endpoint = os.environ.get("EMBED_ENDPOINT")
        if not endpoint:
            return cls("fallback", cache_dir=cache_dir)
        return cls(
            "remote",
            endpoint=endpoint,
            model=os.environ.get("EMBED_MODEL"),
            api_key=os.environ.get("EMBED_API_KEY"),
            cache_dir=cache_dir,
        )

    def describe(self) -> dict:
        return {"mode": self.mode, "model": self.model if self.mode == "remote" else "sha256-box-muller"}

    def _key(self, text: str) -> str:
        return hashlib.sha256(f"{self.mode}\x00{self.model}\x00{text}".encode("utf-8")).hexdigest()

    def _cache_path(self, key: str) -> Path | None:
        return self.cache_dir / f"{key}.f64" if self.cache_dir else None

    def _read_cache(self, key: str) -> np.ndarray | None:
        path = self._cache_path(key)
        if path is None or not path.exists():
            return None
        vec = np.fromfile(path, dtype="<f8").astype(np.float64)
        return vec if vec.shape == (D_LLM,) else None

    def _write_cache(self, key: str, vec: np.ndarray) -> None:
        path = self._cache_path(key)
        if path is None:
            return
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "wb") as fh:
                fh.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())
            os.replace(tmp, path)

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        for t in texts:
            if not t or not t.strip():
                raise EmbeddingError("cannot embed empty text")
        out: dict[str, np.ndarray] = {}
        missing = []
        for t in texts:
            key = self._key(t)
            vec = self._memo.get(key)
            if vec is None:
                vec = self._read_cache(key)
            if vec is None:
                missing.append(t)
            else:
                out[t] = vec
        missing = list(dict.fromkeys(missing))
        if missing:
            fresh = self._remote(missing) if self.mode == "remote" else [hash_unit_vector(t) for t in missing]
            for t, vec in zip(missing, fresh):
                out[t] = vec
                self._write_cache(self._key(t), vec)
        for t, vec in out.items():
            self._memo[self._key(t)] = vec
        return np.stack([out[t] for t in texts]) if texts else np.zeros((0, D_LLM))

    def embed(self, text: str) -> SemanticEmbedding:
        return SemanticEmbedding(self.embed_many([text])[0], text)

    def _remote(self, texts: list[str]) -> list[np.ndarray]:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.model, "input": texts}
        last: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                body = resp.json()
            except (requests.RequestException, ValueError) as exc:
                last = exc
                logger.warning("embedding request failed (attempt %d/%d): %s", attempt + 1, self.retries, exc)
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * (2**attempt))
                continue
            return _parse_embedding_response(body, len(texts))
        raise EmbeddingError(f"embedding endpoint failed after {self.retries} attempts: {last}")


def _parse_embedding_response(body, n: int) -> list[np.ndarray]:
    if isinstance(body, dict) and "embeddings" in body:
        rows = body["embeddings"]
    elif isinstance(body, dict) and "data" in body:
        rows = [item.get("embedding") if isinstance(item, dict) else None for item in body["data"]]
    else:
        raise EmbeddingError("malformed embedding response: no 'embeddings' or 'data' field")
    if not isinstance(rows, list) or len(rows) != n:
        raise EmbeddingError(f"malformed embedding response: expected {n} vectors")
    out = []
    for row in rows:
        try:
            vec = np.asarray(row, dtype=np.float64)
        except (TypeError, ValueError):
            raise EmbeddingError("malformed embedding response: non-numeric vector") from None
        if vec.shape != (D_LLM,) or not np.all(np.isfinite(vec)):
            raise EmbeddingError(f"malformed embedding response: vector shape {vec.shape}")
        out.append(vec)
    return out


def embed_text(provider: EmbeddingProvider, text: str) -> SemanticEmbedding:
    return provider.embed(text)


class FusionResult(NamedTuple):
    output: Tensor
    weights: Tensor | None  # (n_regions, n_sources), rows sum to one


def attend(queries: Tensor, values: Sequence[Tensor]) -> FusionResult:
    """Per-region softmax over sources of ``<q_i, v_ij> / sqrt(d)``, then the weighted sum of sources."""
    if not values:
        raise ShapeError("fusion needs at least one source")
    n, d = values[0].shape
    for v in values:
        if v.shape != (n, d):
            raise ShapeError(f"source shapes differ: {v.shape} vs {(n, d)}")
    if queries.shape != (len(values), d):
        raise ShapeError(f"queries {queries.shape} do not match {len(values)} sources of width {d}")
    scale = 1.0 / np.sqrt(d)
    logits = hstack([scaled_dot(v, take_row(queries, i), scale) for i, v in enumerate(values)])
    alpha = row_softmax(logits)
    out = add_n([mul_col(v, take_col(alpha, i)) for i, v in enumerate(values)])
    return FusionResult(out, alpha)


def project_queries(semantic: np.ndarray, W_Q: Tensor) -> Tensor:
    semantic = np.asarray(semantic, dtype=np.float64)
    if semantic.ndim != 2 or semantic.shape[1] != W_Q.shape[0]:
        raise ShapeError(f"semantic embeddings {semantic.shape} do not match projection {W_Q.shape}")
    return matmul(constant(semantic, "semantic"), W_Q)


def fuse(semantic: np.ndarray, W_Q: Tensor, values: Sequence[Tensor]) -> FusionResult:
    """Fuse per-meta-path region embeddings with queries ``semantic @ W_Q``."""
    if len(values) == 0:
        raise ShapeError("fusion needs at least one meta-path source (N_P = 0)")
    return attend(project_queries(semantic, W_Q), values)


def fuse_cross_task(
    task_queries: np.ndarray,
    W_Q: Tensor,
    other_embeddings: Sequence[np.ndarray],
    current: Tensor,
) -> FusionResult:
    """``current + fuse(task_queries, W_Q, other_embeddings)``; identity without other tasks."""
    if len(other_embeddings) == 0:
        return FusionResult(current, None)
    values = [constant(np.asarray(e, dtype=np.float64), "saved_task_embedding") for e in other_embeddings]
    fused, alpha = fuse(task_queries, W_Q, values)
    return FusionResult(add(current, fused), alpha)
