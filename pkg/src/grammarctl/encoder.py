"""Frozen token encoders providing contextual embeddings for skill detection.

Detector heads are trained on top of a frozen encoder and never update it.
The bundled `HashedWindowEncoder` is a deterministic, CPU-cheap stand-in for
a large pretrained bidirectional encoder: per-token character-n-gram hash
features give sub-word generalization, and a fixed random window layer mixes
both-side context into each token's output embedding. Any encoder exposing
the same surface (tokenize/encode/dim/encoder_id) can be registered instead,
e.g. one backed by a pretrained transformer checkpoint.
"""

from __future__ import annotations

import re
import zlib
from typing import Callable, Protocol

import numpy as np


class EmptyTokenizationError(ValueError):
    """Input produced zero tokens."""


_TOKEN_RE = re.compile(r"[A-Za-z0-9']+|[^\sA-Za-z0-9']")


def word_tokenize(text: str) -> list[str]:
    """Split into word tokens (apostrophes kept) and single punctuation marks."""
    return _TOKEN_RE.findall(text)


class TokenEncoder(Protocol):
    encoder_id: str
    dim: int

    def tokenize(self, text: str) -> list[str]: ...

    def encode(self, text: str) -> np.ndarray: ...

    def encode_tokens(self, tokens: list[str]) -> np.ndarray: ...


def _hash_bucket(key: str, buckets: int) -> int:
    return zlib.crc32(key.encode("utf-8")) % buckets


class HashedWindowEncoder:
    """Deterministic frozen encoder: hashed char-n-gram token features plus a
    fixed random bidirectional window layer.

    Output embedding of token i is the concatenation of its own (normalized)
    feature projection and a tanh mix of the +/-2 token window, so a trained
    head can read both the token identity (with sub-word structure, e.g.
    suffixes) and its immediate context.
    """

    def __init__(
        self,
        dim_base: int = 128,
        buckets: int = 4096,
        window: int = 2,
        ngram_range: tuple[int, int] = (2, 5),
        seed: int = 0x5EED,
        encoder_id: str = "hashwin-256-v1",
    ):
        self.encoder_id = encoder_id
        self.dim_base = dim_base
        self.buckets = buckets
        self.window = window
        self.ngram_range = ngram_range
        self.dim = 2 * dim_base

        rng = np.random.default_rng(seed)
        self._projection = rng.standard_normal((buckets, dim_base)).astype(np.float32)
        # one mixing matrix per window offset in [-window, +window]
        scale = 1.0 / np.sqrt(2 * window + 1)
        self._mix = {
            k: (scale * rng.standard_normal((dim_base, dim_base))).astype(np.float32)
            for k in range(-window, window + 1)
        }
        self._bias = (0.1 * rng.standard_normal(dim_base)).astype(np.float32)
        self._bos = self._unit(rng.standard_normal(dim_base).astype(np.float32))
        self._eos = self._unit(rng.standard_normal(dim_base).astype(np.float32))
        self._token_cache: dict[str, np.ndarray] = {}

    @staticmethod
    def _unit(v: np.ndarray) -> np.ndarray:
        norm = float(np.linalg.norm(v))
        return v / norm if norm > 0 else v

    def tokenize(self, text: str) -> list[str]:
        return word_tokenize(text)

    def _token_features(self, token: str) -> np.ndarray:
        key = token.lower()
        cached = self._token_cache.get(key)
        if cached is not None:
            return cached
        marked = f"<{key}>"
        counts: dict[int, int] = {}
        counts[_hash_bucket(f"w:{key}", self.buckets)] = 1
        lo, hi = self.ngram_range
        for n in range(lo, hi + 1):
            for i in range(len(marked) - n + 1):
                b = _hash_bucket(f"{n}:{marked[i : i + n]}", self.buckets)
                counts[b] = counts.get(b, 0) + 1
        idx = np.fromiter(counts.keys(), dtype=np.int64)
        weight = np.fromiter(counts.values(), dtype=np.float32)
        vec = self._unit(weight @ self._projection[idx])
        if len(self._token_cache) < 500_000:
            self._token_cache[key] = vec
        return vec

    def encode_tokens(self, tokens: list[str]) -> np.ndarray:
        if not tokens:
            raise EmptyTokenizationError("cannot encode an empty token sequence")
        n = len(tokens)
        base = np.stack([self._token_features(t) for t in tokens])
        # pad with boundary vectors so every window position is defined
        w = self.window
        padded = np.vstack([np.tile(self._bos, (w, 1)), base, np.tile(self._eos, (w, 1))])
        ctx = np.tile(self._bias, (n, 1))
        for k in range(-w, w + 1):
            ctx += padded[w + k : w + k + n] @ self._mix[k]
        return np.concatenate([base, np.tanh(ctx)], axis=1)

    def encode(self, text: str) -> np.ndarray:
        tokens = self.tokenize(text)
        if not tokens:
            raise EmptyTokenizationError(f"no tokens in {text!r}")
        return self.encode_tokens(tokens)

    def encode_extensions(self, tokens: list[str], candidates: list[str]) -> tuple[int, np.ndarray]:
        """Embeddings of `tokens + [c]` for every candidate c, batched.

        Appending one token only changes embeddings within the context
        window, so the first `stable` positions keep the embeddings of the
        unextended sequence. Returns (stable, tails) where tails has shape
        (n_candidates, len(tokens) + 1 - stable, dim).
        """
        if not candidates:
            raise ValueError("candidates must be non-empty")
        n = len(tokens)
        w = self.window
        stable = max(0, n - w)
        tail_len = n + 1 - stable
        region_len = tail_len + 2 * w

        # shared base vectors for positions stable-w .. n-1 (BOS-padded on the left)
        shared_rows = []
        for pos in range(stable - w, n):
            shared_rows.append(self._bos if pos < 0 else self._token_features(tokens[pos]))
        shared = (
            np.stack(shared_rows) if shared_rows else np.zeros((0, self.dim_base), np.float32)
        )
        cand_base = np.stack([self._token_features(c) for c in candidates])

        c_count = len(candidates)
        region = np.empty((c_count, region_len, self.dim_base), dtype=np.float32)
        region[:, : len(shared)] = shared[None]
        region[:, len(shared)] = cand_base
        region[:, len(shared) + 1 :] = self._eos

        ctx = np.tile(self._bias, (c_count, tail_len, 1))
        for k in range(-w, w + 1):
            ctx += region[:, k + w : k + w + tail_len] @ self._mix[k]
        base_tail = region[:, w : w + tail_len]
        return stable, np.concatenate([base_tail, np.tanh(ctx)], axis=2)


_ENCODER_FACTORIES: dict[str, Callable[[], TokenEncoder]] = {
    "hashwin-256-v1": HashedWindowEncoder,
}


def register_encoder(encoder_id: str, factory: Callable[[], TokenEncoder]) -> None:
    _ENCODER_FACTORIES[encoder_id] = factory


def get_encoder(encoder_id: str) -> TokenEncoder:
    try:
        return _ENCODER_FACTORIES[encoder_id]()
    except KeyError:
        raise KeyError(
            f"unknown encoder {encoder_id!r}; registered: {sorted(_ENCODER_FACTORIES)}"
        ) from None
