"""Attributed graphs, normalized adjacency and graph statistics."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionMismatchError, NodeIndexError, UndefinedMetricError


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LoadReport:
    duplicate_edges: int = 0
    self_loops_dropped: int = 0


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph with CSR adjacency.

    ``indptr``/``indices`` hold every undirected edge in both directions;
    column indices inside a row are strictly increasing.
    """

    indptr: np.ndarray
    indices: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    c: int
    report: LoadReport = field(default_factory=LoadReport)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.indices) // 2

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @classmethod
    def from_edges(cls, edges, X, Y, c: int | None = None) -> "Graph":
        """Build a graph from an (E, 2) array of undirected pairs.

        Self-loops and duplicates are removed; the counts land in ``report``.
        """
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise DimensionMismatchError(f"feature matrix must be 2-D, got shape {X.shape}")
        Y = np.asarray(Y, dtype=np.int64)
        n = X.shape[0]
        if Y.shape != (n,):
            raise DimensionMismatchError(f"{n} feature rows but {Y.shape[0]} labels")
        if n and Y.min() < 0:
            raise ConfigError("class ids must be non-negative")
        c_seen = int(Y.max()) + 1 if n else 0
        if c is None:
            c = c_seen
        elif c < c_seen:
            raise ConfigError(f"class count {c} smaller than largest label + 1 ({c_seen})")

        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            bad = e[(e < 0) | (e >= n)][0]
            raise NodeIndexError(f"edge references node {bad}, graph has {n} nodes")
        loops = e[:, 0] == e[:, 1]
        n_loops = int(loops.sum())
        e = e[~loops]
        e = np.sort(e, axis=1)
        uniq = np.unique(e, axis=0) if len(e) else e
        n_dup = len(e) - len(uniq)

        rows = np.concatenate([uniq[:, 0], uniq[:, 1]])
        cols = np.concatenate([uniq[:, 1], uniq[:, 0]])
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
        return cls(
            indptr=_frozen(indptr),
            indices=_frozen(cols.astype(np.int64)),
            X=_frozen(X),
            Y=_frozen(Y),
            c=int(c),
            report=LoadReport(duplicate_edges=n_dup, self_loops_dropped=n_loops),
        )

    def edge_list(self) -> np.ndarray:
        """Undirected edges as (E, 2) with u < v, sorted."""
        rows = np.repeat(np.arange(self.n), self.degrees)
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    def adjacency(self) -> sp.csr_array:
        data = np.ones(len(self.indices))
        return sp.csr_array((data, self.indices, self.indptr), shape=(self.n, self.n))

    def content_hash(self) -> bytes:
        h = hashlib.sha256()
        for a in (self.indptr, self.indices, self.X, self.Y):
            h.update(str(a.shape).encode())
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(str(self.c).encode())
        return h.digest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.c == other.c
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.Y, other.Y)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """(D+I)^{-1/2} (A+I) (D+I)^{-1/2} stored as CSR."""

    matrix: sp.csr_array

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def normalized_adjacency(g: Graph) -> NormalizedAdjacency:
    n = g.n
    # self-loop entry goes into its sorted position of each row
    rows = np.repeat(np.arange(n), g.degrees)
    all_rows = np.concatenate([rows, np.arange(n)])
    all_cols = np.concatenate([g.indices, np.arange(n)])
    order = np.lexsort((all_cols, all_rows))
    all_rows, all_cols = all_rows[order], all_cols[order]
    deg1 = g.degrees.astype(np.float64) + 1.0
    # (d_i+1)(d_j+1) is commutative in IEEE arithmetic, so values are symmetric bit-for-bit;
    # one sqrt of the product is also exact whenever the product is a perfect square
    data = 1.0 / np.sqrt(deg1[all_rows] * deg1[all_cols])
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(all_rows, minlength=n), out=indptr[1:])
    m = sp.csr_array((data, all_cols, indptr), shape=(n, n))
    for a in (m.data, m.indices, m.indptr):
        a.setflags(write=False)
    return NormalizedAdjacency(m)


def edge_homophily(g: Graph) -> float:
    """Fraction of undirected edges whose endpoints share a label."""
    if g.num_edges == 0:
        raise UndefinedMetricError("edge homophily is undefined for a graph with no edges")
    e = g.edge_list()
    return float(np.mean(g.Y[e[:, 0]] == g.Y[e[:, 1]]))


def connected_components(g: Graph) -> tuple[int, np.ndarray]:
    return sp.csgraph.connected_components(g.adjacency(), directed=False)


@dataclass(frozen=True, eq=False)
class DataSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("train", "val", "test")}

    def __eq__(self, other) -> bool:
        if not isinstance(other, DataSplit):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("train", "val", "test"))

    __hash__ = None


def random_split(g_or_n, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> DataSplit:
    """Seeded random split; sizes are floors of fraction * n, leftovers go to train."""
    n = g_or_n.n if isinstance(g_or_n, Graph) else int(g_or_n)
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n_val = int(np.floor(fr[1] * n + 1e-9))
    n_test = int(np.floor(fr[2] * n + 1e-9))
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train:n_train + n_val])
    test = np.sort(perm[n_train + n_val:])
    return DataSplit(_frozen(train), _frozen(val), _frozen(test))
