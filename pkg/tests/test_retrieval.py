"""Retrieval: PCA reduction, graph index, exact oracle, latency bench."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecr.retrieval import (
    RetrievalError,
    bench_query_latency,
    brute_force_topk,
    build_index,
    fit_pca,
    load_index,
    load_pca,
    pca_project,
    pca_reconstruct,
    query,
    save_index,
    save_pca,
    validate_index,
)


# ---------------------------------------------------------------------------
# PCA


def test_pca_recovers_dominant_line():
    # points on the y = x line vary along [1, 1]/sqrt(2) only
    t = np.linspace(-3, 3, 50)
    X = np.stack([t, t], axis=1)
    model = fit_pca(X, 1)
    direction = model.components[:, 0]
    want = np.array([1.0, 1.0]) / np.sqrt(2)
    assert np.allclose(np.abs(direction), np.abs(want), atol=1e-9)
    assert abs(abs(float(direction @ want)) - 1.0) < 1e-9


def test_pca_full_rank_reconstructs_exactly():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 6))
    model = fit_pca(X, 6)
    back = pca_reconstruct(model, pca_project(model, X))
    assert np.max(np.abs(back - X)) < 1e-9


def test_pca_variance_ordering_and_total():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 5)) * np.array([5.0, 3.0, 1.0, 0.5, 0.1])
    model = fit_pca(X, 5)
    ev = model.explained_variance
    assert all(b <= a + 1e-12 for a, b in zip(ev, ev[1:]))
    # full-rank explained variance sums to total variance
    total = np.var(X, axis=0, ddof=1).sum()
    assert abs(ev.sum() - total) / total < 1e-9


def test_pca_components_orthonormal():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(100, 8))
    model = fit_pca(X, 4)
    gram = model.components.T @ model.components
    assert np.max(np.abs(gram - np.eye(4))) < 1e-9


def test_pca_isotropic_variance_split():
    # isotropic cloud: every direction carries roughly 1/d of the variance
    rng = np.random.default_rng(3)
    d = 10
    X = rng.normal(size=(20_000, d))
    model = fit_pca(X, d)
    share = model.explained_variance / model.explained_variance.sum()
    assert np.max(np.abs(share - 1.0 / d)) < 0.1 / d * 3


def test_pca_sign_convention_deterministic():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(60, 5))
    m1 = fit_pca(X, 3)
    m2 = fit_pca(X.copy(), 3)
    assert np.array_equal(m1.components, m2.components)
    # largest-magnitude coordinate of each component is positive
    for j in range(3):
        col = m1.components[:, j]
        assert col[int(np.argmax(np.abs(col)))] > 0


def test_pca_degenerate_input_warns():
    X = np.ones((10, 4))
    with pytest.warns(UserWarning, match="zero variance"):
        model = fit_pca(X, 2)
    assert np.allclose(model.explained_variance, 0.0)


def test_pca_input_validation():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(10, 4))
    with pytest.raises(RetrievalError):
        fit_pca(X, 0)
    with pytest.raises(RetrievalError):
        fit_pca(X, 5)
    with pytest.raises(RetrievalError):
        fit_pca(X[:1], 1)
    with pytest.raises(RetrievalError):
        fit_pca(X.ravel(), 1)
    model = fit_pca(X, 2)
    with pytest.raises(RetrievalError):
        pca_project(model, np.ones(3))
    with pytest.raises(RetrievalError):
        pca_reconstruct(model, np.ones(3))


def test_pca_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    X = rng.normal(size=(50, 7))
    model = fit_pca(X, 3)
    path = str(tmp_path / "pca.bin")
    save_pca(model, path)
    loaded = load_pca(path)
    assert np.array_equal(loaded.mean, model.mean)
    assert np.array_equal(loaded.components, model.components)
    assert np.array_equal(loaded.explained_variance, model.explained_variance)


def test_pca_large_dimension_subspace_path():
    # d > 1024 exercises the iterative solver; compare against dense
    # eigendecomposition on the same data restricted to a thin rank
    rng = np.random.default_rng(7)
    basis = rng.normal(size=(1100, 3))
    coeffs = rng.normal(size=(80, 3)) * np.array([4.0, 2.0, 1.0])
    X = coeffs @ basis.T + rng.normal(scale=1e-3, size=(80, 1100))
    model = fit_pca(X, 3, seed=0)
    gram = model.components.T @ model.components
    assert np.max(np.abs(gram - np.eye(3))) < 1e-6
    # reconstruction captures nearly all variance of the rank-3 signal
    back = pca_reconstruct(model, pca_project(model, X))
    residual = np.linalg.norm(X - back) / np.linalg.norm(X - X.mean(axis=0))
    assert residual < 0.01


# ---------------------------------------------------------------------------
# brute-force oracle


def test_brute_force_against_independent_loop():
    rng = np.random.default_rng(8)
    vectors = rng.normal(size=(30, 5))
    q = rng.normal(size=5)
    got = brute_force_topk(vectors, q, 7)
    # independent implementation: scalar cosine loop plus sort
    sims = []
    qn = q / np.linalg.norm(q)
    for row in vectors:
        sims.append(float(np.dot(row / np.linalg.norm(row), qn)))
    want = sorted(range(30), key=lambda i: (-sims[i], i))[:7]
    assert list(got.ids) == [str(i) for i in want]
    for s, i in zip(got.scores, want):
        assert abs(s - sims[i]) < 1e-12


def test_brute_force_scores_non_increasing():
    rng = np.random.default_rng(9)
    vectors = rng.normal(size=(40, 6))
    got = brute_force_topk(vectors, rng.normal(size=6), 10)
    assert all(b <= a + 1e-15 for a, b in zip(got.scores, got.scores[1:]))


def test_brute_force_k_clamps_to_n():
    vectors = np.eye(3)
    got = brute_force_topk(vectors, np.array([1.0, 0, 0]), 10)
    assert len(got.ids) == 3
    assert got.ids[0] == "0"


def test_brute_force_zero_query_rejected():
    with pytest.raises(RetrievalError):
        brute_force_topk(np.eye(3), np.zeros(3), 1)


# ---------------------------------------------------------------------------
# graph index


def _cloud(n=300, d=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d))


def test_index_self_hit():
    vectors = _cloud(seed=10)
    index = build_index(vectors, seed=0)
    for i in (0, 7, 150, 299):
        res = query(index, vectors[i], 1, ef_search=32)
        assert res.ids[0] == str(i)
        assert abs(res.scores[0] - 1.0) < 1e-6


def test_index_small_n_exact():
    # with n well below ef_search the beam covers the whole graph
    vectors = _cloud(n=40, seed=11)
    index = build_index(vectors, m=8, ef_construction=40, seed=1)
    rng = np.random.default_rng(12)
    for _ in range(20):
        q = rng.normal(size=8)
        got = query(index, q, 5, ef_search=40)
        want = brute_force_topk(vectors, q, 5)
        assert got.ids == want.ids


def test_query_k_prefix_property():
    vectors = _cloud(seed=13)
    index = build_index(vectors, seed=2)
    q = np.random.default_rng(14).normal(size=8)
    big = query(index, q, 10, ef_search=64)
    small = query(index, q, 3, ef_search=64)
    assert big.ids[:3] == small.ids


def test_query_validation():
    vectors = _cloud(n=20, seed=15)
    index = build_index(vectors, seed=0)
    with pytest.raises(RetrievalError):
        query(index, np.ones(8), 0)
    with pytest.raises(RetrievalError):
        query(index, np.ones(8), 5, ef_search=3)
    with pytest.raises(RetrievalError):
        query(index, np.ones(5), 1)
    with pytest.raises(RetrievalError):
        query(index, np.zeros(8), 1)


def test_build_validation():
    with pytest.raises(RetrievalError):
        build_index(_cloud(n=5), ids=["a", "b"])
    with pytest.raises(RetrievalError):
        build_index(_cloud(n=5), m=1)
    with pytest.raises(RetrievalError):
        build_index(_cloud(n=5), ef_construction=0)


def test_index_structure_valid():
    index = build_index(_cloud(n=200, seed=16), m=6, ef_construction=30, seed=3)
    assert validate_index(index) == []


def test_index_deterministic_under_seed():
    vectors = _cloud(n=100, seed=17)
    a = build_index(vectors, m=8, ef_construction=40, seed=4)
    b = build_index(vectors, m=8, ef_construction=40, seed=4)
    assert np.array_equal(a.levels, b.levels)
    assert np.array_equal(a.adj0, b.adj0)
    assert a.entry_point == b.entry_point
    c = build_index(vectors, m=8, ef_construction=40, seed=5)
    assert not np.array_equal(a.levels, c.levels)


def test_index_custom_ids_surface_in_results():
    vectors = _cloud(n=10, seed=18)
    ids = [f"doc-{i:03d}" for i in range(10)]
    index = build_index(vectors, ids=ids, m=4, ef_construction=20, seed=0)
    res = query(index, vectors[3], 1, ef_search=10)
    assert res.ids[0] == "doc-3".replace("doc-3", "doc-003")


def test_index_save_load_round_trip(tmp_path):
    vectors = _cloud(n=80, seed=19)
    index = build_index(vectors, m=6, ef_construction=30, seed=6)
    path = str(tmp_path / "index.bin")
    save_index(index, path)
    loaded = load_index(path)
    assert loaded.n == index.n
    assert loaded.m == index.m
    assert loaded.entry_point == index.entry_point
    assert np.array_equal(loaded.adj0, index.adj0)
    assert np.array_equal(loaded.deg0, index.deg0)
    assert loaded.ids == index.ids
    assert loaded.upper == index.upper
    q = np.random.default_rng(20).normal(size=8)
    assert query(loaded, q, 5) == query(index, q, 5)
    assert validate_index(loaded) == []


def test_recall_reasonable_at_modest_scale():
    # sanity bar well below the acceptance threshold so it stays fast
    vectors = _cloud(n=2000, d=16, seed=21)
    index = build_index(vectors, m=12, ef_construction=60, seed=7)
    rng = np.random.default_rng(22)
    hits = total = 0
    for _ in range(50):
        q = rng.normal(size=16)
        got = set(query(index, q, 5, ef_search=64).ids)
        want = set(brute_force_topk(vectors, q, 5).ids)
        hits += len(got & want)
        total += 5
    assert hits / total >= 0.9


def test_visited_grows_with_ef():
    vectors = _cloud(n=1000, d=8, seed=23)
    index = build_index(vectors, m=8, ef_construction=40, seed=8)
    q = np.random.default_rng(24).normal(size=8)
    visited = [query(index, q, 5, ef_search=ef).visited for ef in (8, 32, 128)]
    assert visited[0] < visited[-1]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 100))
def test_query_never_duplicates_ids(seed):
    vectors = _cloud(n=60, d=6, seed=seed)
    index = build_index(vectors, m=6, ef_construction=24, seed=seed)
    q = np.random.default_rng(seed + 1).normal(size=6)
    res = query(index, q, 10, ef_search=24)
    assert len(set(res.ids)) == len(res.ids)


# ---------------------------------------------------------------------------
# latency bench


def test_bench_reports_consistent_fields():
    vectors = _cloud(n=200, d=8, seed=25)
    index = build_index(vectors, m=6, ef_construction=24, seed=0)
    queries = _cloud(n=37, d=8, seed=26)
    report = bench_query_latency(index, queries, k=3, ef_search=16, min_measurements=100)
    # cycles the 37 queries ceil(100/37) = 3 times
    assert report.n_queries == 111
    assert report.k == 3
    assert report.ef_search == 16
    assert report.p50_us <= report.p95_us <= report.p99_us
    assert report.mean_us > 0
    assert report.mean_visited > 0
    assert report.total_visited == pytest.approx(report.mean_visited * report.n_queries)


def test_bench_single_query_vector():
    vectors = _cloud(n=50, d=8, seed=27)
    index = build_index(vectors, m=6, ef_construction=24, seed=0)
    report = bench_query_latency(index, vectors[0], k=1, min_measurements=10)
    assert report.n_queries == 10


def test_bench_empty_query_set_rejected():
    vectors = _cloud(n=50, d=8, seed=28)
    index = build_index(vectors, m=6, ef_construction=24, seed=0)
    with pytest.raises(RetrievalError):
        bench_query_latency(index, np.zeros((0, 8)), k=1)
