"""Synthetic stochastic-block-model datasets with class-aligned Gaussian features."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .graph import Graph


def _inter_blocks(c: int, pattern: str) -> np.ndarray:
    """Boolean (c, c) matrix of block pairs allowed to carry inter-class edges."""
    if pattern == "uniform":
        allowed = ~np.eye(c, dtype=bool)
    elif pattern == "cyclic":
        allowed = np.zeros((c, c), dtype=bool)
        for a in range(c):
            if c > 1:
                allowed[a, (a + 1) % c] = allowed[(a + 1) % c, a] = True
        np.fill_diagonal(allowed, False)
    else:
        raise ConfigError(f"unknown inter-class pattern {pattern!r}; choose 'uniform' or 'cyclic'")
    return allowed


def sbm_probabilities(sizes, homophily: float, avg_degree: float, pattern: str = "uniform") -> tuple[float, float]:
    """Within/between block edge probabilities hitting the expected degree and homophily.

    ``pattern="cyclic"`` restricts inter-class edges to neighbouring classes
    on a ring, so a heterophilous graph still carries class structure.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    n = sizes.sum()
    intra_pairs = float((sizes * (sizes - 1) / 2).sum())
    allowed = _inter_blocks(len(sizes), pattern)
    inter_pairs = float(np.triu(np.outer(sizes, sizes) * allowed, k=1).sum())
    n_edges = n * avg_degree / 2
    p_in = homophily * n_edges / intra_pairs if intra_pairs else 0.0
    p_out = (1 - homophily) * n_edges / inter_pairs if inter_pairs else 0.0
    if (homophily > 0 and intra_pairs == 0) or (homophily < 1 and inter_pairs == 0):
        raise ConfigError("homophily level infeasible for the given block sizes")
    if p_in > 1 or p_out > 1:
        raise ConfigError(
            f"average degree {avg_degree} with homophily {homophily} needs edge probability "
            f"{max(p_in, p_out):.3f} > 1; lower --avg-degree"
        )
    return p_in, p_out


def sbm_graph(n: int, c: int, homophily: float, avg_degree: float = 10.0, feature_dim: int = 32,
              feature_noise: float = 1.0, center_scale: float = 1.0, seed: int = 0,
              kind: str = "sbm", pattern: str = "uniform") -> Graph:
    """Balanced c-block SBM; features are the class mean plus isotropic noise.

    ``kind="sbm"`` draws class means from a standard normal; ``kind="blobs"``
    places them on scaled coordinate axes (needs ``feature_dim >= c``), which
    makes the classes equidistant blobs.
    """
    if n < 2 or c < 1 or c > n:
        raise ConfigError(f"need n >= 2 and 1 <= c <= n, got n={n}, c={c}")
    if not 0.0 <= homophily <= 1.0:
        raise ConfigError(f"homophily must be in [0, 1], got {homophily}")
    if avg_degree <= 0:
        raise ConfigError("avg_degree must be positive")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % c
    y = y[rng.permutation(n)]
    sizes = np.bincount(y, minlength=c)
    p_in, p_out = sbm_probabilities(sizes, homophily, avg_degree, pattern)
    block_p = np.where(_inter_blocks(c, pattern), p_out, 0.0)
    np.fill_diagonal(block_p, p_in)

    if n <= 4000:
        u, v = np.triu_indices(n, k=1)
        keep = rng.random(len(u)) < block_p[y[u], y[v]]
        edges = np.stack([u[keep], v[keep]], axis=1)
    else:
        parts = []
        for r in range(n - 1):
            cols = np.arange(r + 1, n)
            keep = rng.random(len(cols)) < block_p[y[r], y[cols]]
            parts.append(np.stack([np.full(int(keep.sum()), r), cols[keep]], axis=1))
        edges = np.concatenate(parts)

    if kind == "sbm":
        centers = rng.standard_normal((c, feature_dim)) * center_scale
    elif kind == "blobs":
        if feature_dim < c:
            raise ConfigError("blobs needs feature_dim >= number of classes")
        centers = np.zeros((c, feature_dim))
        centers[np.arange(c), np.arange(c)] = center_scale * 3.0
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose 'sbm' or 'blobs'")
    X = centers[y] + feature_noise * rng.standard_normal((n, feature_dim))
    return Graph.from_edges(edges, X, y, c=c)
