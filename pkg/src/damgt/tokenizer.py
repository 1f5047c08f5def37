"""Hop2Token: per-node sequences of multi-hop neighborhood tokens."""
from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CorruptCacheError, NodeIndexError, NumericError, StaleCacheError
from .graph import Graph, NormalizedAdjacency
from .io import atomic_write
from .preprocessing import DualPositionalEncoding

H2TK_MAGIC = b"H2TK"
_HEADER = struct.Struct("<4sQQQ32s")


def enhanced_features(X: np.ndarray, enc: DualPositionalEncoding) -> np.ndarray:
    """X' = X || X^dup; the first ``d`` columns are the raw features untouched."""
    return np.concatenate([np.asarray(X, dtype=np.float64), enc.dup], axis=1)


def default_hops(n: int) -> int:
    return 3 if n < 100_000 else 10


def propagate_all(adj: NormalizedAdjacency, Xp: np.ndarray, S: int, workers: int = 1) -> list[np.ndarray]:
    """Levels ``[X', A X', ..., A^S X']`` by repeated sparse products."""
    if S < 1:
        raise ConfigError(f"max hop S must be >= 1, got {S}")
    Xp = np.asarray(Xp, dtype=np.float64)
    if Xp.shape[0] != adj.n:
        raise ConfigError(f"feature rows {Xp.shape[0]} != adjacency size {adj.n}")

    def run(cols):
        out = [Xp[:, cols]]
        for _ in range(S):
            out.append(adj.matrix @ out[-1])
        return out

    if workers > 1 and Xp.shape[1] > 1:
        # columns propagate independently, so splitting them cannot change any value
        blocks = np.array_split(np.arange(Xp.shape[1]), min(workers, Xp.shape[1]))
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, blocks))
        levels = [np.concatenate([p[s] for p in parts], axis=1) for s in range(S + 1)]
    else:
        levels = run(slice(None))
    levels[0] = Xp.copy()
    for s, lv in enumerate(levels):
        bad = ~np.isfinite(lv)
        if bad.any():
            node = int(np.argwhere(bad)[0, 0])
            raise NumericError(f"non-finite value at hop {s}, node {node}")
    return levels


@dataclass(frozen=True, eq=False)
class TokenSequence:
    node: int
    tokens: np.ndarray

    @property
    def S(self) -> int:
        return self.tokens.shape[0] - 1


def build_sequence(levels, v: int) -> TokenSequence:
    n = levels[0].shape[0]
    if not 0 <= v < n:
        raise NodeIndexError(f"node {v} out of range [0, {n})")
    return TokenSequence(node=int(v), tokens=np.stack([lv[v] for lv in levels]))


def stack_levels(levels) -> np.ndarray:
    """Level-major array of shape (S+1, n, width)."""
    return np.ascontiguousarray(np.stack(levels))


def gather_batch(levels: np.ndarray, nodes) -> np.ndarray:
    """Token sequences for ``nodes`` as a (batch, S+1, width) array."""
    return np.ascontiguousarray(np.asarray(levels)[:, np.asarray(nodes)].transpose(1, 0, 2))


def source_hash(g: Graph, config: dict) -> bytes:
    """SHA-256 over graph content and the preprocessing configuration."""
    h = hashlib.sha256(g.content_hash())
    h.update(json.dumps(config, sort_keys=True).encode())
    return h.digest()


def cache_write(levels, path, source: bytes) -> None:
    arr = stack_levels(levels)
    if len(source) != 32:
        raise ValueError("source hash must be 32 bytes")
    s1, n, width = arr.shape
    header = _HEADER.pack(H2TK_MAGIC, n, width, s1 - 1, source)
    atomic_write(path, header + np.ascontiguousarray(arr, dtype="<f8").tobytes())


def cache_header(path) -> tuple[int, int, int, bytes]:
    with open(path, "rb") as f:
        buf = f.read(_HEADER.size)
    if len(buf) < _HEADER.size or buf[:4] != H2TK_MAGIC:
        raise CorruptCacheError(f"{path}: missing or truncated H2TK header")
    _, n, width, S, src = _HEADER.unpack(buf)
    return n, width, S, src


def cache_read(path, expected_source: bytes | None = None) -> np.ndarray:
    """Read a token cache as a (S+1, n, width) array; verify its source hash when given."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _HEADER.size or buf[:4] != H2TK_MAGIC:
        raise CorruptCacheError(f"{path}: missing or truncated H2TK header")
    _, n, width, S, src = _HEADER.unpack_from(buf)
    if expected_source is not None and src != expected_source:
        raise StaleCacheError(f"{path}: cache was built from a different graph or configuration")
    count = (S + 1) * n * width
    if len(buf) != _HEADER.size + 8 * count:
        raise CorruptCacheError(f"{path}: expected {8 * count} payload bytes, found {len(buf) - _HEADER.size}")
    arr = np.frombuffer(buf, "<f8", count, _HEADER.size).reshape(S + 1, n, width)
    return arr.astype(np.float64)
