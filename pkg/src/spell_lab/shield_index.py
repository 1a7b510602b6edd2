"""Radius search over large shield sets: exact scan and a flat IVF index.

The IVF index partitions the shield centers into Voronoi cells of k-means
centroids and answers a radius query by scanning only the ``n_probe`` cells
whose centroids are nearest to the query. Hits are always true hits; misses can
only come from neighbors that live in unprobed cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np


class Hit(NamedTuple):
    id: int
    center: np.ndarray
    distance: float


@dataclass
class RadiusQueryResult:
    hits: list
    probed_cells: int
    exhaustive: bool

    @property
    def ids(self) -> np.ndarray:
        return np.array([h.id for h in self.hits], dtype=np.int64)


def default_n_cells(n: int) -> int:
    """Square root of the dataset size, rounded up."""
    return max(1, math.ceil(math.sqrt(n)))


def _sq_dists(points: np.ndarray, centroids: np.ndarray, chunk: int = 2**22) -> np.ndarray:
    out = np.empty((points.shape[0], centroids.shape[0]))
    rows = max(1, chunk // max(1, centroids.size))
    for lo in range(0, points.shape[0], rows):
        diff = points[lo:lo + rows, None, :] - centroids[None, :, :]
        out[lo:lo + rows] = (diff * diff).sum(-1)
    return out


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, i.e. ties go to the lowest centroid id
    return np.argmin(_sq_dists(points, centroids), axis=1)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = _sq_dists(points, centroids[:1])[:, 0]
    for i in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centroids[i] = points[idx]
        d2 = np.minimum(d2, _sq_dists(points, centroids[i:i + 1])[:, 0])
    return centroids


def kmeans(points, n_clusters: int, seed: int, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd iterations from a k-means++ start; empty clusters keep their centroid."""
    points = np.asarray(points, dtype=float)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, n_clusters, rng)
    for _ in range(max_iter):
        labels = _assign(points, centroids)
        counts = np.bincount(labels, minlength=n_clusters)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        shift = np.sqrt(((new - centroids) ** 2).sum(1)).max()
        centroids = new
        if shift < tol:
            break
    return centroids, _assign(points, centroids)


@dataclass
class IvfIndex:
    """Flat inverted-file index.

    Vectors are stored grouped by cell: cell ``c`` owns rows
    ``offsets[c]:offsets[c + 1]`` of ``ids`` and ``vectors``.
    """

    centroids: np.ndarray
    ids: np.ndarray
    vectors: np.ndarray
    offsets: np.ndarray
    seed: int

    @property
    def n_cells(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def cell_sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def cell_lists(self) -> list:
        return [
            (self.ids[a:b], self.vectors[a:b])
            for a, b in zip(self.offsets[:-1], self.offsets[1:])
        ]

    def all_centers(self) -> np.ndarray:
        """Centers in original id order."""
        out = np.empty_like(self.vectors)
        out[self.ids] = self.vectors
        return out

    def check_partition(self) -> None:
        n = len(self)
        if self.offsets[0] != 0 or self.offsets[-1] != n or np.any(np.diff(self.offsets) < 0):
            raise ValueError("cell offsets do not partition the index")
        if not np.array_equal(np.sort(self.ids), np.arange(n)):
            raise ValueError("shield ids are not a permutation of 0..N-1")
        cells = np.repeat(np.arange(self.n_cells), self.cell_sizes)
        if n and not np.array_equal(_assign(self.vectors, self.centroids), cells):
            raise ValueError("a shield is stored outside its nearest-centroid cell")

    def probe_order(self, query: np.ndarray) -> np.ndarray:
        d2 = _sq_dists(query[None, :], self.centroids)[0]
        return np.argsort(d2, kind="stable")


def build_index(centers, n_cells: int | None = None, seed: int = 0) -> IvfIndex:
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    n = centers.shape[0]
    if n < 1:
        raise ValueError("cannot index an empty shield set")
    n_cells = default_n_cells(n) if n_cells is None else int(n_cells)
    if not 1 <= n_cells <= n:
        raise ValueError(f"n_cells must lie in [1, {n}], got {n_cells}")
    centroids, labels = kmeans(centers, n_cells, seed)
    order = np.argsort(labels, kind="stable")
    offsets = np.concatenate([[0], np.cumsum(np.bincount(labels, minlength=n_cells))])
    return IvfIndex(centroids, order.astype(np.int64), centers[order].copy(),
                    offsets.astype(np.int64), int(seed))


def _collect(ids, vectors, query, radius) -> list:
    diff = vectors - query[None, :]
    d2 = (diff * diff).sum(-1)
    inside = np.flatnonzero(d2 <= radius * radius)
    hits = [Hit(int(ids[i]), vectors[i], math.sqrt(d2[i])) for i in inside]
    hits.sort(key=lambda h: (h.distance, h.id))
    return hits


def radius_search(index: IvfIndex, query, radius: float, n_probe: int = 2) -> RadiusQueryResult:
    if n_probe < 1:
        raise ValueError("n_probe must be >= 1")
    query = np.asarray(query, dtype=float)
    cells = index.probe_order(query)[:n_probe]
    parts = [np.arange(index.offsets[c], index.offsets[c + 1]) for c in cells]
    rows = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    hits = _collect(index.ids[rows], index.vectors[rows], query, radius)
    return RadiusQueryResult(hits, len(cells), len(cells) == index.n_cells)


def candidate_rows(index: IvfIndex, queries: np.ndarray, radius: float, n_probe: int) -> list:
    """Per query, original ids of the indexed centers within ``radius`` (unsorted)."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    d2c = _sq_dists(queries, index.centroids)
    order = np.argsort(d2c, axis=1, kind="stable")[:, :n_probe]
    probed = np.zeros((queries.shape[0], index.n_cells), dtype=bool)
    np.put_along_axis(probed, order, True, axis=1)
    r2 = radius * radius
    found_q, found_id = [], []
    # loop over cells rather than queries: each cell is scanned once for all queries probing it
    for c in np.flatnonzero(probed.any(0)):
        a, b = index.offsets[c], index.offsets[c + 1]
        if a == b:
            continue
        qs = np.flatnonzero(probed[:, c])
        diff = queries[qs, None, :] - index.vectors[None, a:b, :]
        qi, ri = np.nonzero((diff * diff).sum(-1) <= r2)
        found_q.append(qs[qi])
        found_id.append(index.ids[a + ri])
    if not found_q:
        return [np.zeros(0, dtype=np.int64) for _ in range(queries.shape[0])]
    fq = np.concatenate(found_q)
    fid = np.concatenate(found_id)
    srt = np.argsort(fq, kind="stable")
    bounds = np.searchsorted(fq[srt], np.arange(queries.shape[0] + 1))
    return [fid[srt[bounds[i]:bounds[i + 1]]] for i in range(queries.shape[0])]


def brute_force_search(centers, query, radius: float) -> RadiusQueryResult:
    centers = np.asarray(centers, dtype=float)
    query = np.asarray(query, dtype=float)
    if centers.size == 0:
        return RadiusQueryResult([], 0, True)
    centers = np.atleast_2d(centers)
    return RadiusQueryResult(_collect(np.arange(centers.shape[0]), centers, query, radius), 1, True)


# --- persistence ---------------------------------------------------------------
#
# Every field is a little-endian float64: header (dim, N, n_cells, seed), the
# n_cells x dim centroid block, then per cell its size followed by
# size x (1 + dim) values (id, vector).


def save_index(index: IvfIndex, path) -> None:
    if not 0 <= index.seed < 2**53:
        raise ValueError("seed must be representable exactly as a double")
    parts = [np.array([index.dim, len(index), index.n_cells, index.seed], dtype="<f8"),
             index.centroids.astype("<f8").ravel()]
    for (ids, vecs) in index.cell_lists:
        parts.append(np.array([ids.size], dtype="<f8"))
        parts.append(np.column_stack([ids.astype("<f8"), vecs]).astype("<f8").ravel())
    Path(path).write_bytes(b"".join(p.tobytes() for p in parts))


def load_index(path) -> IvfIndex:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    if raw.size < 4:
        raise ValueError(f"{path}: truncated index header")
    dim, n, n_cells, seed = (int(v) for v in raw[:4])
    pos = 4
    end = pos + n_cells * dim
    if raw.size < end:
        raise ValueError(f"{path}: truncated centroid block")
    centroids = raw[pos:end].reshape(n_cells, dim).astype(float)
    pos = end
    ids, vecs, sizes = [], [], []
    for c in range(n_cells):
        if pos >= raw.size:
            raise ValueError(f"{path}: truncated at cell {c}")
        size = int(raw[pos])
        pos += 1
        block = raw[pos:pos + size * (1 + dim)]
        if block.size != size * (1 + dim):
            raise ValueError(f"{path}: truncated at cell {c}")
        block = block.reshape(size, 1 + dim)
        ids.append(block[:, 0].astype(np.int64))
        vecs.append(block[:, 1:].astype(float))
        sizes.append(size)
        pos += size * (1 + dim)
    if pos != raw.size:
        raise ValueError(f"{path}: trailing bytes after last cell")
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    index = IvfIndex(centroids, np.concatenate(ids) if ids else np.zeros(0, np.int64),
                     np.vstack(vecs) if vecs else np.zeros((0, dim)), offsets, seed)
    if offsets[-1] != n:
        raise ValueError(f"{path}: header says N={n} but cells hold {offsets[-1]}")
    index.check_partition()
    return index
