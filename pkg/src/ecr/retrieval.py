"""On-device retrieval subsystem: PCA reduction and an HNSW cosine index.

PCA brings embeddings down to a small working dimension (the reference
pipeline is 768 to 64) via covariance eigendecomposition, switching to a
seeded subspace iteration when the input dimension is too large for a
dense decomposition.

The index is a hierarchical navigable small-world graph built from
scratch: layered adjacency lists, exponential level assignment with the
standard 1/ln(M) scale, beam search over a per-call visited set, and
diversity-aware neighbor selection.  Vectors are stored unit-normalized
in float64 so cosine similarity is a plain dot product.  Every edge is
kept bidirectional within its layer, node degree is capped at M on upper
layers and 2M on layer 0, and queries report how many nodes they touched
so search cost is observable.

A brute-force scorer provides the exact reference ranking for recall
measurements, and a small benchmark harness reports per-query latency
percentiles.
"""

from __future__ import annotations

import heapq
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .binio import ByteReader, ByteWriter, read_envelope, write_envelope

PCA_MAGIC = b"ECRP"
PCA_VERSION = 1
INDEX_MAGIC = b"ECRH"
INDEX_VERSION = 1


class RetrievalError(ValueError):
    """Raised on invalid retrieval inputs or corrupted index state."""


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaModel:
    """Orthonormal projection onto the top-r principal directions."""

    mean: np.ndarray  # (d,)
    components: np.ndarray  # (d, r), columns orthonormal
    explained_variance: np.ndarray  # (r,), non-increasing, >= 0

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.components = np.asarray(self.components, dtype=np.float64)
        self.explained_variance = np.asarray(self.explained_variance, dtype=np.float64)

    @property
    def d(self) -> int:
        return self.components.shape[0]

    @property
    def r(self) -> int:
        return self.components.shape[1]


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """Deterministic sign convention: largest-|entry| coordinate positive."""
    out = components.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        pivot = int(np.argmax(np.abs(col)))
        if col[pivot] < 0:
            out[:, j] = -col
    return out


def _eigh_pca(centered: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    n = centered.shape[0]
    cov = (centered.T @ centered) / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:r]
    return eigvecs[:, order], np.maximum(eigvals[order], 0.0)


def _subspace_pca(
    centered: np.ndarray, r: int, seed: int, max_iter: int = 1000, tol: float = 1e-10
) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal subspace iteration on the covariance, never materializing it."""
    n = centered.shape[0]
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((centered.shape[1], r)))
    prev = np.zeros(r)
    for _ in range(max_iter):
        z = centered.T @ (centered @ q) / (n - 1)
        q, _ = np.linalg.qr(z)
        ritz = np.sort(np.einsum("ij,ij->j", q, centered.T @ (centered @ q) / (n - 1)))[::-1]
        if np.all(np.abs(ritz - prev) <= tol * np.maximum(1.0, np.abs(ritz))):
            break
        prev = ritz
    small = q.T @ (centered.T @ (centered @ q)) / (n - 1)
    small = (small + small.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(small)
    order = np.argsort(eigvals)[::-1]
    return q @ eigvecs[:, order], np.maximum(eigvals[order], 0.0)


def fit_pca(X, r: int, seed: int = 0) -> PcaModel:
    """Fit the top-r principal directions of the rows of X.

    X is an EmbeddingMatrix or a plain (n, d) array.  Dense
    eigendecomposition handles d up to 1024; larger dimensions use seeded
    subspace iteration.  Degenerate input (zero variance in every
    direction) produces a zero-variance model with a warning rather than
    an error.
    """
    data = np.asarray(getattr(X, "data", X), dtype=np.float64)
    if data.ndim != 2:
        raise RetrievalError("PCA input must be a 2-d matrix")
    n, d = data.shape
    if n < 2:
        raise RetrievalError(f"PCA needs at least 2 rows, got {n}")
    if not 1 <= r <= min(n, d):
        raise RetrievalError(f"r must be in [1, {min(n, d)}], got {r}")
    mean = data.mean(axis=0)
    centered = data - mean
    if float(np.abs(centered).max(initial=0.0)) == 0.0:
        warnings.warn("PCA input has zero variance; components are arbitrary axes")
        return PcaModel(
            mean=mean, components=np.eye(d, r), explained_variance=np.zeros(r)
        )
    if d <= 1024:
        components, variances = _eigh_pca(centered, r)
    else:
        components, variances = _subspace_pca(centered, r, seed)
    return PcaModel(
        mean=mean,
        components=_fix_signs(components),
        explained_variance=variances,
    )


def pca_project(model: PcaModel, v: np.ndarray) -> np.ndarray:
    """components^T (v - mean); accepts one vector or a stack of rows."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.d:
        raise RetrievalError(
            f"vector dimension {v.shape[-1]} does not match model d={model.d}"
        )
    return (v - model.mean) @ model.components


def pca_reconstruct(model: PcaModel, y: np.ndarray) -> np.ndarray:
    """Back-projection: components y + mean."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != model.r:
        raise RetrievalError(
            f"vector dimension {y.shape[-1]} does not match model r={model.r}"
        )
    return y @ model.components.T + model.mean


def save_pca(model: PcaModel, path: str) -> None:
    w = ByteWriter()
    w.u64(model.d)
    w.u64(model.r)
    w.array(model.mean, "float64")
    w.array(model.components, "float64")
    w.array(model.explained_variance, "float64")
    write_envelope(path, PCA_MAGIC, PCA_VERSION, w.getvalue())


def load_pca(path: str) -> PcaModel:
    r = ByteReader(read_envelope(path, PCA_MAGIC, PCA_VERSION))
    d = r.u64()
    rank = r.u64()
    mean = r.array("float64")
    components = r.array("float64")
    variances = r.array("float64")
    r.done()
    if mean.shape != (d,) or components.shape != (d, rank) or variances.shape != (rank,):
        raise RetrievalError(f"{path}: stored shapes do not match declared (d={d}, r={rank})")
    return PcaModel(mean=mean, components=components, explained_variance=variances)


# ---------------------------------------------------------------------------
# HNSW


@dataclass(frozen=True)
class QueryResult:
    """Top-k hits: ids with non-increasing cosine scores, plus search cost."""

    ids: tuple[str, ...]
    scores: tuple[float, ...]
    visited: int


@dataclass
class HnswIndex:
    """Layered small-world graph over unit-normalized float64 vectors.

    Immutable once built; queries allocate their own scratch state, so a
    shared index supports concurrent readers.
    """

    m: int
    ef_construction: int
    seed: int
    data: np.ndarray  # (n, d) unit rows
    ids: list[str]
    levels: np.ndarray  # (n,) int32, each node's top layer
    adj0: np.ndarray  # (n, 2m) int32, layer-0 neighbors, -1 padded
    deg0: np.ndarray  # (n,) int32
    upper: list[dict[int, list[int]]]  # adjacency for layers 1..top
    entry_point: int

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @property
    def max_level(self) -> int:
        return len(self.upper)

    def neighbors(self, layer: int, node: int) -> list[int]:
        if layer == 0:
            return self.adj0[node, : self.deg0[node]].tolist()
        return list(self.upper[layer - 1].get(node, ()))


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    data = np.asarray(vectors, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise RetrievalError("index vectors must form a non-empty 2-d matrix")
    norms = np.linalg.norm(data, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise RetrievalError("cannot index a zero vector under cosine similarity")
    return np.ascontiguousarray(data / norms)


def _greedy_step(data, neigh_of, q: np.ndarray, start: int) -> tuple[int, int]:
    """Hill-climb to a local similarity maximum; returns (node, touched)."""
    cur = start
    cur_sim = float(data[cur] @ q)
    touched = 1
    while True:
        arr = neigh_of(cur)
        if arr.size == 0:
            return cur, touched
        sims = data[arr] @ q
        touched += int(arr.size)
        best = int(np.argmax(sims))
        if sims[best] <= cur_sim:
            return cur, touched
        cur = int(arr[best])
        cur_sim = float(sims[best])


def _beam_search(
    data,
    neigh_of,
    q: np.ndarray,
    entries: list[int],
    ef: int,
    visited: np.ndarray,
    stamp: int,
) -> tuple[list[tuple[float, int]], int]:
    """Best-first search on one layer.

    ``visited`` is an int64 stamp array reused across calls; a node counts
    as seen when its cell equals ``stamp``.  Returns (sim, node) pairs
    sorted best-first plus the number of distinct nodes touched.
    """
    results: list[tuple[float, int]] = []  # min-heap keyed by sim (worst on top)
    candidates: list[tuple[float, int]] = []  # min-heap keyed by -sim (best on top)
    sims0 = data[entries] @ q
    for node, s in zip(entries, sims0.tolist()):
        if visited[node] == stamp:
            continue
        visited[node] = stamp
        heapq.heappush(results, (s, node))
        heapq.heappush(candidates, (-s, node))
    n_visited = len(results)
    while len(results) > ef:
        heapq.heappop(results)
    while candidates:
        neg, node = heapq.heappop(candidates)
        if len(results) == ef and -neg < results[0][0]:
            break
        arr = neigh_of(node)
        if arr.size == 0:
            continue
        fresh = arr[visited[arr] != stamp]
        if fresh.size == 0:
            continue
        visited[fresh] = stamp
        n_visited += int(fresh.size)
        sims = data[fresh] @ q
        full = len(results) == ef
        worst = results[0][0] if full else -np.inf
        for s, nd in zip(sims.tolist(), fresh.tolist()):
            if not full:
                heapq.heappush(results, (s, nd))
                heapq.heappush(candidates, (-s, nd))
                full = len(results) == ef
                worst = results[0][0]
            elif s > worst:
                heapq.heapreplace(results, (s, nd))
                heapq.heappush(candidates, (-s, nd))
                worst = results[0][0]
    return sorted(results, reverse=True), n_visited


def _select_heuristic(
    cand: np.ndarray, sims_to_q: np.ndarray, cap: int, data: np.ndarray
) -> list[int]:
    """Diversity-aware neighbor selection.

    Candidates are scanned nearest-first; one is kept only if it is closer
    to the query than to every already-kept neighbor.  Remaining slots are
    then filled with the nearest discarded candidates, so the result has
    exactly min(cap, len(cand)) entries.  Pairwise similarities come from
    a single gemm over the candidate block.
    """
    order = np.argsort(-sims_to_q, kind="stable")
    cand = cand[order]
    sims = sims_to_q[order].tolist()
    n = cand.shape[0]
    if n <= cap:
        return cand.tolist()
    cross = data[cand] @ data[cand].T
    # best_kept[i] = max similarity from candidate i to any kept neighbor,
    # maintained with one vectorized update per accepted candidate
    best_kept = np.full(n, -np.inf)
    kept: list[int] = []
    dropped: list[int] = []
    for i in range(n):
        if len(kept) == cap:
            break
        if best_kept[i] < sims[i]:
            kept.append(i)
            np.maximum(best_kept, cross[:, i], out=best_kept)
        else:
            dropped.append(i)
    for i in dropped:
        if len(kept) == cap:
            break
        kept.append(i)
    return cand[kept].tolist()


class _Builder:
    """Incremental HNSW constructor; exclusive single-writer state."""

    def __init__(self, data: np.ndarray, m: int, ef_construction: int, seed: int):
        n = data.shape[0]
        self.data = data
        self.m = m
        self.m0 = 2 * m
        self.efc = ef_construction
        rng = np.random.default_rng(seed)
        # level = floor(-ln(U) / ln(M)), U uniform on (0, 1]
        u = 1.0 - rng.random(n)
        self.levels = np.minimum(
            np.floor(-np.log(u) / np.log(m)).astype(np.int32), 64
        )
        self.adj0 = np.full((n, self.m0), -1, dtype=np.int32)
        self.deg0 = np.zeros(n, dtype=np.int32)
        self.upper: list[dict[int, list[int]]] = []
        self.entry = -1
        self.entry_level = -1
        self.visited = np.zeros(n, dtype=np.int64)
        self.stamp = 0

    def _neigh_of(self, layer: int):
        if layer == 0:
            adj0, deg0 = self.adj0, self.deg0

            def fn(node: int) -> np.ndarray:
                return adj0[node, : deg0[node]]

        else:
            table = self.upper[layer - 1]
            empty = np.empty(0, dtype=np.int32)

            def fn(node: int) -> np.ndarray:
                lst = table.get(node)
                return np.asarray(lst, dtype=np.int32) if lst else empty

        return fn

    def _set_neighbors(self, layer: int, node: int, neigh: list[int]) -> None:
        if layer == 0:
            self.deg0[node] = len(neigh)
            self.adj0[node, : len(neigh)] = neigh
            self.adj0[node, len(neigh):] = -1
        else:
            self.upper[layer - 1][node] = list(neigh)

    def _connect(self, layer: int, node: int, picked: list[int]) -> None:
        """Link node <-> picked, re-pruning any neighbor pushed past its cap.

        A pruned edge is removed from BOTH endpoints, keeping the graph
        strictly bidirectional.
        """
        cap = self.m0 if layer == 0 else self.m
        self._set_neighbors(layer, node, picked)
        neigh_of = self._neigh_of(layer)
        for other in picked:
            current = neigh_of(other).tolist() if layer == 0 else list(self.upper[layer - 1].get(other, ()))
            current.append(node)
            if len(current) <= cap:
                self._set_neighbors(layer, other, current)
                continue
            cand = np.asarray(current, dtype=np.int64)
            sims = self.data[cand] @ self.data[other]
            keep = _select_heuristic(cand, sims, cap, self.data)
            self._set_neighbors(layer, other, keep)
            kept = set(keep)
            for dropped in current:
                if dropped in kept:
                    continue
                back = self.neighbors_list(layer, dropped)
                if other in back:
                    back.remove(other)
                    self._set_neighbors(layer, dropped, back)

    def neighbors_list(self, layer: int, node: int) -> list[int]:
        if layer == 0:
            return self.adj0[node, : self.deg0[node]].tolist()
        return list(self.upper[layer - 1].get(node, ()))

    def insert(self, i: int) -> None:
        level = int(self.levels[i])
        while len(self.upper) < level:
            self.upper.append({})
        if self.entry < 0:
            self.entry = i
            self.entry_level = level
            return
        q = self.data[i]
        ep = self.entry
        for layer in range(self.entry_level, level, -1):
            ep, _ = _greedy_step(self.data, self._neigh_of(layer), q, ep)
        entries = [ep]
        for layer in range(min(level, self.entry_level), -1, -1):
            self.stamp += 1
            found, _ = _beam_search(
                self.data, self._neigh_of(layer), q, entries, self.efc,
                self.visited, self.stamp,
            )
            cand = np.asarray([node for _, node in found], dtype=np.int64)
            sims = np.asarray([s for s, _ in found])
            picked = _select_heuristic(cand, sims, self.m, self.data)
            self._connect(layer, i, picked)
            entries = [node for _, node in found]
        if level > self.entry_level:
            self.entry = i
            self.entry_level = level


def build_index(
    vectors: np.ndarray,
    ids: list[str] | None = None,
    m: int = 16,
    ef_construction: int = 200,
    seed: int = 0,
) -> HnswIndex:
    """Insert all vectors in row order; deterministic under the seed."""
    data = _unit_rows(vectors)
    n = data.shape[0]
    if ids is None:
        ids = [str(i) for i in range(n)]
    if len(ids) != n:
        raise RetrievalError(f"{len(ids)} ids for {n} vectors")
    if m < 2:
        raise RetrievalError(f"M must be at least 2, got {m}")
    if ef_construction < 1:
        raise RetrievalError(f"ef_construction must be positive, got {ef_construction}")
    b = _Builder(data, m, ef_construction, seed)
    for i in range(n):
        b.insert(i)
    return HnswIndex(
        m=m,
        ef_construction=ef_construction,
        seed=seed,
        data=data,
        ids=list(ids),
        levels=b.levels,
        adj0=b.adj0,
        deg0=b.deg0,
        upper=b.upper,
        entry_point=b.entry,
    )


def _index_neigh_of(index: HnswIndex, layer: int):
    if layer == 0:
        adj0, deg0 = index.adj0, index.deg0

        def fn(node: int) -> np.ndarray:
            return adj0[node, : deg0[node]]

    else:
        table = index.upper[layer - 1]
        empty = np.empty(0, dtype=np.int32)

        def fn(node: int) -> np.ndarray:
            lst = table.get(node)
            return np.asarray(lst, dtype=np.int32) if lst else empty

    return fn


def query(index: HnswIndex, v: np.ndarray, k: int, ef_search: int = 64) -> QueryResult:
    """Approximate top-k by cosine; returns ids, scores, and visited count."""
    if index.n == 0:
        raise RetrievalError("cannot query an empty index")
    if k < 1:
        raise RetrievalError(f"k must be positive, got {k}")
    if ef_search < k:
        raise RetrievalError(f"ef_search={ef_search} must be at least k={k}")
    q = np.asarray(v, dtype=np.float64).ravel()
    if q.shape[0] != index.d:
        raise RetrievalError(
            f"query dimension {q.shape[0]} does not match index d={index.d}"
        )
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise RetrievalError("cannot query with a zero vector")
    q = q / norm
    visited_total = 0
    ep = index.entry_point
    for layer in range(index.max_level, 0, -1):
        ep, touched = _greedy_step(index.data, _index_neigh_of(index, layer), q, ep)
        visited_total += touched
    scratch = np.zeros(index.n, dtype=np.int64)
    found, n_visited = _beam_search(
        index.data, _index_neigh_of(index, 0), q, [ep], ef_search, scratch, 1
    )
    visited_total += n_visited
    top = found[: min(k, index.n)]
    return QueryResult(
        ids=tuple(index.ids[node] for _, node in top),
        scores=tuple(float(s) for s, _ in top),
        visited=visited_total,
    )


def brute_force_topk(
    vectors: np.ndarray, v: np.ndarray, k: int, ids: list[str] | None = None
) -> QueryResult:
    """Exact top-k by cosine over all rows; ties break toward the lower row."""
    data = _unit_rows(vectors)
    if ids is None:
        ids = [str(i) for i in range(data.shape[0])]
    q = np.asarray(v, dtype=np.float64).ravel()
    if q.shape[0] != data.shape[1]:
        raise RetrievalError(
            f"query dimension {q.shape[0]} does not match vectors d={data.shape[1]}"
        )
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise RetrievalError("cannot query with a zero vector")
    sims = data @ (q / norm)
    k = min(k, data.shape[0])
    order = np.argsort(-sims, kind="stable")[:k]
    return QueryResult(
        ids=tuple(ids[int(i)] for i in order),
        scores=tuple(float(sims[int(i)]) for i in order),
        visited=data.shape[0],
    )


@dataclass(frozen=True)
class LatencyReport:
    """Wall-clock query statistics in microseconds."""

    n_queries: int
    k: int
    ef_search: int
    mean_us: float
    p50_us: float
    p95_us: float
    p99_us: float
    mean_visited: float
    total_visited: int


def bench_query_latency(
    index: HnswIndex,
    queries: np.ndarray,
    k: int,
    ef_search: int = 64,
    min_measurements: int = 1000,
) -> LatencyReport:
    """Time individual queries, cycling the query set until at least
    ``min_measurements`` measurements are collected."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim == 1:
        queries = queries[None, :]
    if queries.shape[0] == 0:
        raise RetrievalError("empty query set")
    reps = -(-min_measurements // queries.shape[0])
    times: list[float] = []
    visited = 0
    for _ in range(reps):
        for row in queries:
            t0 = time.perf_counter_ns()
            res = query(index, row, k, ef_search)
            times.append((time.perf_counter_ns() - t0) / 1000.0)
            visited += res.visited
    arr = np.asarray(times)
    return LatencyReport(
        n_queries=arr.shape[0],
        k=k,
        ef_search=ef_search,
        mean_us=float(arr.mean()),
        p50_us=float(np.percentile(arr, 50)),
        p95_us=float(np.percentile(arr, 95)),
        p99_us=float(np.percentile(arr, 99)),
        mean_visited=visited / arr.shape[0],
        total_visited=visited,
    )


def validate_index(index: HnswIndex) -> list[str]:
    """Walk the graph and report every structural violation (empty = valid)."""
    problems: list[str] = []
    n = index.n
    if n > 0 and not 0 <= index.entry_point < n:
        problems.append(f"entry point {index.entry_point} out of range")
    for layer in range(index.max_level + 1):
        cap = 2 * index.m if layer == 0 else index.m
        members = range(n) if layer == 0 else sorted(index.upper[layer - 1].keys())
        for node in members:
            neigh = index.neighbors(layer, node)
            if len(neigh) > cap:
                problems.append(
                    f"layer {layer}: node {node} degree {len(neigh)} exceeds cap {cap}"
                )
            if len(set(neigh)) != len(neigh):
                problems.append(f"layer {layer}: node {node} has duplicate edges")
            if node in neigh:
                problems.append(f"layer {layer}: node {node} links to itself")
            for other in neigh:
                if index.levels[other] < layer:
                    problems.append(
                        f"layer {layer}: node {node} links to {other} below its level"
                    )
                elif node not in index.neighbors(layer, other):
                    problems.append(
                        f"layer {layer}: edge {node}->{other} has no back edge"
                    )
    return problems


def save_index(index: HnswIndex, path: str) -> None:
    w = ByteWriter()
    w.u64(index.n)
    w.u64(index.d)
    w.u32(index.m)
    w.u32(index.ef_construction)
    w.i64(index.seed)
    w.i64(index.entry_point)
    w.u32(index.max_level)
    w.array(index.data, "float64")
    w.text_list(index.ids)
    w.array(index.levels, "int32")
    w.array(index.adj0, "int32")
    w.array(index.deg0, "int32")
    for layer in index.upper:
        w.u64(len(layer))
        for node in sorted(layer):
            neigh = layer[node]
            w.u64(node)
            w.u64(len(neigh))
            for other in neigh:
                w.u64(other)
    write_envelope(path, INDEX_MAGIC, INDEX_VERSION, w.getvalue())


def load_index(path: str) -> HnswIndex:
    r = ByteReader(read_envelope(path, INDEX_MAGIC, INDEX_VERSION))
    n = r.u64()
    d = r.u64()
    m = r.u32()
    efc = r.u32()
    seed = r.i64()
    entry = r.i64()
    max_level = r.u32()
    data = r.array("float64")
    ids = r.text_list()
    levels = r.array("int32")
    adj0 = r.array("int32")
    deg0 = r.array("int32")
    if data.shape != (n, d) or len(ids) != n or levels.shape != (n,):
        raise RetrievalError(f"{path}: stored shapes do not match declared (n={n}, d={d})")
    upper: list[dict[int, list[int]]] = []
    for _ in range(max_level):
        count = r.u64()
        layer: dict[int, list[int]] = {}
        for _ in range(count):
            node = r.u64()
            deg = r.u64()
            layer[node] = [r.u64() for _ in range(deg)]
        upper.append(layer)
    r.done()
    return HnswIndex(
        m=m,
        ef_construction=efc,
        seed=seed,
        data=data,
        ids=ids,
        levels=levels,
        adj0=np.ascontiguousarray(adj0),
        deg0=np.ascontiguousarray(deg0),
        upper=upper,
        entry_point=entry,
    )
