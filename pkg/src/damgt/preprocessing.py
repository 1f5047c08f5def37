"""Dual positional encoding: cluster-centroid attribute encoding plus Laplacian eigenvectors."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.csgraph as csgraph
from scipy.linalg import eigh_tridiagonal

from .errors import ConfigError, CorruptCacheError, NumericError
from .graph import Graph, NormalizedAdjacency
from .io import atomic_write

PE_VARIANTS = ("dup", "ap", "tp", "none")
TRIVIAL_EIG_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class Clustering:
    k: int
    assignment: np.ndarray
    centroids: np.ndarray
    iterations_run: int
    objective: float
    history: tuple = ()
    converged: bool = True


@dataclass(frozen=True)
class KMeansConfig:
    max_iter: int = 100
    seed: int = 0


def _sq_dists(X, C):
    # ||x||^2 - 2 x.c + ||c||^2 loses precision for near-identical points; explicit difference keeps it exact
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = ((X - X[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[idx].copy()


def _update_centroids(X, assign, centroids):
    k = centroids.shape[0]
    new = np.empty_like(centroids)
    counts = np.bincount(assign, minlength=k)
    for i in range(k):
        if counts[i]:
            new[i] = X[assign == i].mean(axis=0)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        # distance of each point to the centroid it currently belongs to
        own = ((X - new[assign]) ** 2).sum(axis=1) if counts.any() else np.zeros(len(X))
        taken = set()
        for i in empty:
            order = np.argsort(-own, kind="stable")
            j = next(int(p) for p in order if int(p) not in taken)
            taken.add(j)
            new[i] = X[j]
    return new, len(empty)


def kmeans(X: np.ndarray, k: int, max_iter: int = 100, seed: int = 0) -> Clustering:
    """Lloyd's algorithm from k-means++ seeding.

    Stops once assignments stop changing. Empty clusters are re-seeded at
    the point farthest from its own centroid so exactly ``k`` clusters survive.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"k-means needs 1 <= k <= n, got k={k}, n={n}")
    if max_iter < 1:
        raise ConfigError("max_iter must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(X, k, rng)
    d2 = _sq_dists(X, centroids)
    assign = np.argmin(d2, axis=1)
    history = [float(d2[np.arange(n), assign].sum())]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        centroids, _ = _update_centroids(X, assign, centroids)
        d2 = _sq_dists(X, centroids)
        new_assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            converged = True
            break
        assign = new_assign
    if not converged:
        centroids, _ = _update_centroids(X, assign, centroids)
    objective = float(((X - centroids[assign]) ** 2).sum())
    return Clustering(
        k=k,
        assignment=assign,
        centroids=centroids,
        iterations_run=it,
        objective=objective,
        history=tuple(history),
        converged=converged,
    )


def cosine_scores(X: np.ndarray, clustering: Clustering) -> np.ndarray:
    """Cosine between each row and its own centroid; 0 when either vector is zero."""
    C = clustering.centroids[clustering.assignment]
    num = (X * C).sum(axis=1)
    den = np.linalg.norm(X, axis=1) * np.linalg.norm(C, axis=1)
    out = np.zeros(len(X))
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return np.clip(out, -1.0, 1.0)


def attribute_encoding(X: np.ndarray, clustering: Clustering) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ap, delta)`` with ``ap[j] = delta[j] * centroid[cluster(j)]``."""
    X = np.asarray(X, dtype=np.float64)
    if len(clustering.assignment) != len(X):
        raise ConfigError("clustering does not cover every node")
    delta = cosine_scores(X, clustering)
    return delta[:, None] * clustering.centroids[clustering.assignment], delta


def _component_basis(adj: NormalizedAdjacency):
    """Orthonormal basis of the trivial eigenspace: one sqrt(deg+1)-weighted indicator per component."""
    A = adj.matrix
    n_comp, labels = csgraph.connected_components(A, directed=False)
    basis = np.zeros((A.shape[0], n_comp))
    basis[np.arange(A.shape[0]), labels] = np.sqrt(1.0 / np.asarray(A.diagonal()))  # diag = 1/(deg+1)
    basis /= np.linalg.norm(basis, axis=0)
    return n_comp, basis


def _lanczos_run(matvec, locked, start, want, max_dim, tol, check_every=10):
    """One Lanczos run with full reorthogonalisation, deflated against ``locked``.

    Returns ``(accepted, top)``: the leading Ritz pairs (largest first) whose
    true residual is below ``tol``, stopping at the first that is not, and
    the leading Ritz pair regardless of convergence (used for restarts).
    """
    n = start.shape[0]

    def project(v):
        for _ in range(2):
            v = v - locked @ (locked.T @ v)
        return v

    q = project(start)
    q /= np.linalg.norm(q)
    dim = min(max_dim, n - locked.shape[1])
    Q = np.zeros((n, dim))
    alphas, betas = np.zeros(dim), np.zeros(dim)
    Q[:, 0] = q
    for j in range(dim):
        w = matvec(Q[:, j])
        alphas[j] = Q[:, j] @ w
        w = w - alphas[j] * Q[:, j]
        if j:
            w = w - betas[j - 1] * Q[:, j - 1]
        for _ in range(2):
            w = w - Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
            w = project(w)
        beta = float(np.linalg.norm(w))
        invariant = beta < 1e-12 or j == n - locked.shape[1] - 1
        last = invariant or j == dim - 1
        if last or (j + 1) % check_every == 0:
            if j == 0:
                theta, S = alphas[:1], np.ones((1, 1))
            else:
                theta, S = eigh_tridiagonal(alphas[: j + 1], betas[:j])
            order = np.argsort(-theta, kind="stable")
            est = beta * np.abs(S[-1, order])
            if invariant:
                est[:] = 0.0
            n_conv = 0
            while n_conv < len(order) and est[n_conv] < tol:
                n_conv += 1
            if last or n_conv >= min(want, j + 1):
                accepted = []
                top = None
                for i in order:
                    v = project(Q[:, : j + 1] @ S[:, i])
                    v /= np.linalg.norm(v)
                    Av = matvec(v)
                    th = float(v @ Av)
                    res = float(np.linalg.norm(Av - th * v))
                    if top is None:
                        top = (th, v, res)
                    if res >= tol or len(accepted) >= want:
                        break
                    accepted.append((th, v, res))
                if accepted or last:
                    return accepted, top
        if invariant:
            break
        betas[j] = beta
        Q[:, j + 1] = w / beta
    raise AssertionError("unreachable")


def _fix_sign(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))  # argmax returns the first index among ties
    return -v if v[i] < 0 else v


def laplacian_eigenpairs(adj: NormalizedAdjacency, m: int, seed: int = 0, tol: float = 1e-10,
                         max_dim: int = 300, max_runs: int = 200):
    """The ``m`` smallest non-trivial eigenpairs of ``L = I - A_hat``, ascending.

    Solved as the largest eigenpairs of ``A_hat``.  Component indicators are
    deflated exactly; further pairs are locked run by run, so exactly
    repeated eigenvalues are recovered one copy per run.  A final run on the
    deflated operator confirms nothing larger than the m-th value is missing.
    """
    n = adj.n
    n_comp, locked = _component_basis(adj)
    available = n - n_comp
    if m < 1:
        raise ConfigError("spectral dimension m must be >= 1")
    if m > available:
        raise ConfigError(
            f"requested m={m} eigenvectors but the graph has {n_comp} connected component(s), "
            f"leaving only {available} non-trivial eigenvalues"
        )
    rng = np.random.default_rng(seed)
    A = adj.matrix
    matvec = lambda x: A @ x  # noqa: E731
    pairs: list[tuple[float, np.ndarray]] = []
    start = rng.standard_normal(n)
    for _ in range(max_runs):
        if locked.shape[1] >= n:
            break
        want = max(1, m - len(pairs))
        accepted, top = _lanczos_run(matvec, locked, start, want, max_dim, tol)
        if len(pairs) >= m:
            # verification run: converged top of the deflated operator must not beat the current m-th value
            if not accepted:
                start = top[1]
                continue
            if accepted[0][0] <= sorted(p[0] for p in pairs)[-m] + tol:
                break
        if not accepted:
            start = top[1]  # explicit restart from the best Ritz vector
            continue
        for th, v, _ in accepted:
            pairs.append((th, v))
        locked = np.column_stack([locked] + [v for _, v, _ in accepted])
        start = rng.standard_normal(n)
    else:
        raise NumericError(f"Lanczos did not converge to tol={tol} within {max_runs} runs")

    pairs.sort(key=lambda p: -p[0])
    pairs = pairs[:m]
    lams = np.array([1.0 - th for th, _ in pairs])
    if lams.min() <= TRIVIAL_EIG_TOL:
        raise NumericError("trivial eigenvalue leaked past component deflation")
    vecs = [_fix_sign(v) for _, v in pairs]
    # deterministic order: ascending eigenvalue, lexicographic vector order inside numerically equal groups
    idx = list(np.argsort(lams, kind="stable"))
    groups, cur = [], [idx[0]]
    for i in idx[1:]:
        if lams[i] - lams[cur[-1]] < 1e-9:
            cur.append(i)
        else:
            groups.append(cur)
            cur = [i]
    groups.append(cur)
    order = [i for grp in groups for i in sorted(grp, key=lambda i: tuple(vecs[i]))]
    return lams[order], np.column_stack([vecs[i] for i in order])


def topology_encoding(adj: NormalizedAdjacency, m: int, seed: int = 0) -> np.ndarray:
    return laplacian_eigenpairs(adj, m, seed=seed)[1]


@dataclass(frozen=True, eq=False)
class DualPositionalEncoding:
    ap: np.ndarray
    tp: np.ndarray
    variant: str = "dup"
    delta: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.tp.shape[1]

    @property
    def dup(self) -> np.ndarray:
        parts = {"dup": (self.ap, self.tp), "ap": (self.ap,), "tp": (self.tp,), "none": ()}[self.variant]
        n = self.ap.shape[0] if self.ap.size or not self.tp.size else self.tp.shape[0]
        return np.concatenate(parts, axis=1) if parts else np.zeros((n, 0))


def dual_encoding(g: Graph, adj: NormalizedAdjacency, m: int = 10, kmeans_cfg: KMeansConfig | None = None,
                  variant: str = "dup", eig_seed: int = 0) -> DualPositionalEncoding:
    """Attribute-aware plus topology-aware encoding, k = number of classes.

    ``variant`` selects which halves are kept: ``dup`` both, ``ap`` only the
    attribute half ("w/o tp"), ``tp`` only the spectral half ("w/o ap"),
    ``none`` neither.
    """
    if variant not in PE_VARIANTS:
        raise ConfigError(f"unknown positional-encoding variant {variant!r}; choose from {PE_VARIANTS}")
    kmeans_cfg = kmeans_cfg or KMeansConfig()
    prov = {"kmeans_seed": kmeans_cfg.seed, "kmeans_max_iter": kmeans_cfg.max_iter, "m": m, "variant": variant}
    n = g.n
    ap = np.zeros((n, 0))
    delta = None
    if variant in ("dup", "ap"):
        cl = kmeans(g.X, g.c, max_iter=kmeans_cfg.max_iter, seed=kmeans_cfg.seed)
        ap, delta = attribute_encoding(g.X, cl)
        prov["kmeans_iterations"] = cl.iterations_run
    tp = np.zeros((n, 0))
    lams = None
    if variant in ("dup", "tp"):
        lams, tp = laplacian_eigenpairs(adj, m, seed=eig_seed)
    return DualPositionalEncoding(ap=ap, tp=tp, variant=variant, delta=delta, eigenvalues=lams, provenance=prov)


DPEC_MAGIC = b"DPEC"


def write_encoding(path, enc: DualPositionalEncoding) -> None:
    n = max(enc.ap.shape[0], enc.tp.shape[0])
    d, m = enc.ap.shape[1], enc.tp.shape[1]
    ap = enc.ap.reshape(n, d)
    tp = enc.tp.reshape(n, m)
    body = DPEC_MAGIC + struct.pack("<QQQ", n, d, m)
    body += np.ascontiguousarray(ap, dtype="<f8").tobytes() + np.ascontiguousarray(tp, dtype="<f8").tobytes()
    footer = dict(enc.provenance)
    footer.setdefault("variant", enc.variant)
    body += json.dumps(footer, sort_keys=True).encode()
    atomic_write(path, body)


def read_encoding(path) -> DualPositionalEncoding:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 28 or buf[:4] != DPEC_MAGIC:
        raise CorruptCacheError(f"{path}: not a DPEC encoding file")
    n, d, m = struct.unpack_from("<QQQ", buf, 4)
    off = 28
    need = off + 8 * n * (d + m)
    if len(buf) < need:
        raise CorruptCacheError(f"{path}: truncated encoding payload")
    ap = np.frombuffer(buf, "<f8", n * d, off).reshape(n, d).astype(np.float64)
    tp = np.frombuffer(buf, "<f8", n * m, off + 8 * n * d).reshape(n, m).astype(np.float64)
    try:
        footer = json.loads(buf[need:].decode()) if len(buf) > need else {}
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptCacheError(f"{path}: unreadable provenance footer") from None
    return DualPositionalEncoding(ap=ap, tp=tp, variant=footer.get("variant", "dup"), provenance=footer)


__all__ = [
    "Clustering", "KMeansConfig", "DualPositionalEncoding", "PE_VARIANTS", "kmeans", "cosine_scores",
    "attribute_encoding", "laplacian_eigenpairs", "topology_encoding", "dual_encoding",
    "write_encoding", "read_encoding",
]
