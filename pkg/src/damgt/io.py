"""Reading and writing graph files (edge list, DMAT/CSV features, labels)."""
from __future__ import annotations

import os
import struct
import tempfile
import warnings
from pathlib import Path

import numpy as np

from .errors import CorruptCacheError, DimensionMismatchError, NodeIndexError, ParseError
from .graph import Graph

DMAT_MAGIC = b"DMAT"


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_edges(path) -> np.ndarray:
    edges = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ParseError(path, line_no, f"expected 'u v', got {line.strip()!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(path, line_no, f"non-integer node id in {line.strip()!r}") from None
            if u < 0 or v < 0:
                raise NodeIndexError(f"{path}:{line_no}: negative node id")
            edges.append((u, v))
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


def write_edges(path, edges: np.ndarray) -> None:
    text = "".join(f"{u} {v}\n" for u, v in np.asarray(edges).tolist())
    atomic_write(path, text.encode())


def encode_matrix(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack("<QQ", *a.shape) + a.tobytes()


def decode_matrix(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode a rows/cols-prefixed float64 matrix starting at ``offset``."""
    if len(buf) < offset + 16:
        raise CorruptCacheError("truncated matrix header")
    rows, cols = struct.unpack_from("<QQ", buf, offset)
    offset += 16
    nbytes = rows * cols * 8
    if len(buf) < offset + nbytes:
        raise CorruptCacheError(f"truncated matrix body: need {nbytes} bytes")
    a = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols)
    return a.astype(np.float64), offset + nbytes


def read_features(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        rows = []
        with open(path) as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    rows.append([float(t) for t in line.split(",")])
                except ValueError:
                    raise ParseError(path, line_no, "non-numeric feature value") from None
                if len(rows[-1]) != len(rows[0]):
                    raise ParseError(path, line_no, f"expected {len(rows[0])} columns, got {len(rows[-1])}")
        return np.array(rows, dtype=np.float64).reshape(len(rows), -1 if rows else 0)
    buf = path.read_bytes()
    if buf[:4] != DMAT_MAGIC:
        raise ParseError(path, 1, "missing DMAT magic bytes")
    try:
        X, end = decode_matrix(buf, 4)
    except CorruptCacheError as exc:
        raise ParseError(path, 1, str(exc)) from None
    if end != len(buf):
        raise ParseError(path, 1, f"{len(buf) - end} trailing bytes after matrix")
    return X


def write_features(path, X: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        text = "".join(",".join(repr(float(v)) for v in row) + "\n" for row in np.asarray(X))
        atomic_write(path, text.encode())
    else:
        atomic_write(path, DMAT_MAGIC + encode_matrix(X))


def read_labels(path) -> np.ndarray:
    labels = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            s = line.strip()
            if not s:
                continue
            try:
                y = int(s)
            except ValueError:
                raise ParseError(path, line_no, f"non-integer label {s!r}") from None
            if y < 0:
                raise ParseError(path, line_no, f"negative label {y}")
            labels.append(y)
    return np.array(labels, dtype=np.int64)


def write_labels(path, Y: np.ndarray) -> None:
    atomic_write(path, "".join(f"{int(y)}\n" for y in Y).encode())


def load_graph(edge_file, feature_file, label_file) -> Graph:
    X = read_features(feature_file)
    Y = read_labels(label_file)
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatchError(f"{X.shape[0]} feature rows but {Y.shape[0]} labels")
    edges = read_edges(edge_file)
    if edges.size and edges.max() >= X.shape[0]:
        raise NodeIndexError(f"edge file references node {int(edges.max())}, only {X.shape[0]} nodes")
    g = Graph.from_edges(edges, X, Y)
    if g.report.self_loops_dropped:
        warnings.warn(f"dropped {g.report.self_loops_dropped} self-loop(s) from {edge_file}", stacklevel=2)
    return g


def save_graph(g: Graph, edge_file, feature_file, label_file) -> None:
    write_edges(edge_file, g.edge_list())
    write_features(feature_file, g.X)
    write_labels(label_file, g.Y)


def dataset_paths(directory) -> tuple[Path, Path, Path]:
    """Standard filenames inside a dataset directory written by ``synth``."""
    d = Path(directory)
    return d / "edges.txt", d / "features.dmat", d / "labels.txt"
