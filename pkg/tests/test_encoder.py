import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from g2r import tensor as T
from g2r.encoder import (
    CachedRegion,
    EncoderConfig,
    EncoderParams,
    GraphBatch,
    PreparedGraph,
    RegionCacheError,
    SinkAssignment,
    encode,
    encode_batch,
    encode_many,
    gin_forward,
    load_regions,
    multi_sink_propagation,
    sample_sinks,
    save_regions,
)
from g2r.graph import Graph, generate_er, permute

P3 = Graph(3, ((0, 1), (1, 2)))
SMALL = EncoderConfig(k=3, d=8, D=8, out=4, n_paths=3, path_len=3)


def _params(cfg, seed=0):
    return EncoderParams.init(cfg, np.random.default_rng(seed))


# --- multi-sink propagation ----------------------------------------------------------


def test_propagation_examples():
    s = multi_sink_propagation(P3, SinkAssignment([[1.0], [2.0], [3.0]]), 3)
    assert s.tolist() == [[2, 3, 2], [3, 2, 3], [2, 3, 2]]
    s = multi_sink_propagation(Graph(1), SinkAssignment([[7.0]]), 3)
    assert s.tolist() == [[7, 7, 7]]
    s = multi_sink_propagation(Graph(2, ((0, 1),)), SinkAssignment([[1.0], [2.0]]), 3)
    assert s.tolist() == [[2, 1, 2], [1, 2, 1]]


def test_propagation_groups_columns_by_network():
    assign = SinkAssignment([[1.0, 30.0], [2.0, 20.0], [3.0, 10.0]])
    s = multi_sink_propagation(P3, assign, 2)
    assert s.shape == (3, 4)
    assert s[0].tolist() == [2, 3, 20, 30]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10**6), st.sampled_from(["exp", "cube", "affine"]))
def test_propagation_commutes_with_monotone_maps(n, seed, kind):
    g = generate_er(n, 0.4, seed=seed)
    assign = sample_sinks(n, 3, seed, 0)
    fn = {"exp": np.exp, "cube": lambda x: x**3, "affine": lambda x: 5.0 * x - 2.0}[kind]
    before = fn(multi_sink_propagation(g, assign, 4))
    after = multi_sink_propagation(g, SinkAssignment(fn(assign.values)), 4)
    assert np.array_equal(before, after)


def test_sink_assignment_validation():
    with pytest.raises(ValueError, match="distinct"):
        SinkAssignment([[0.5], [0.5]])
    with pytest.raises(ValueError):
        SinkAssignment([0.1, 0.2])
    with pytest.raises(ValueError, match="rows"):
        multi_sink_propagation(P3, SinkAssignment([[0.1], [0.2]]), 2)


def test_sample_sinks_is_reproducible():
    a = sample_sinks(6, 3, seed=4, graph_id=2)
    assert np.array_equal(a.values, sample_sinks(6, 3, seed=4, graph_id=2).values)
    assert not np.array_equal(a.values, sample_sinks(6, 3, seed=4, graph_id=3).values)
    assert np.all((a.values > 0) & (a.values < 1))


# --- GIN ---------------------------------------------------------------------------------


def _identity_layer(d):
    return (T.tensor(np.eye(d)), T.tensor(np.zeros(d)), T.tensor(np.eye(d)), T.tensor(np.zeros(d)))


def test_gin_hand_example():
    x0 = T.tensor([[1.0], [2.0], [3.0]])
    src = np.array([0, 1, 1, 2])
    dst = np.array([1, 0, 2, 1])
    (x1,) = gin_forward(x0, src, dst, [_identity_layer(1)], skip=False)
    assert x1.data.reshape(-1).tolist() == [3, 6, 5]


def test_gin_zero_input_stays_zero():
    rng = np.random.default_rng(0)
    layers = [
        (T.tensor(rng.normal(size=(4, 4))), T.tensor(np.zeros(4)), T.tensor(rng.normal(size=(4, 4))), T.tensor(np.zeros(4)))
        for _ in range(3)
    ]
    out = gin_forward(T.tensor(np.zeros((3, 4))), np.array([0, 1, 1, 2]), np.array([1, 0, 2, 1]), layers)
    assert len(out) == 3 and all(np.all(x.data == 0) for x in out)


def test_gin_single_node_has_no_neighbour_sum():
    x0 = T.tensor([[0.5, -1.0]])
    layer = _identity_layer(2)
    (x1,) = gin_forward(x0, np.zeros(0, int), np.zeros(0, int), [layer])
    assert x1.data.tolist() == [[1.0, -1.0]]  # relu(x0) + x0


# --- encode -----------------------------------------------------------------------


def test_zero_params_give_softplus_zero():
    params = _params(SMALL)
    for _, t in params.named():
        t.assign(np.zeros(t.shape))
    g = generate_er(6, 0.5, seed=1)
    r = encode(g, params, SMALL, sample_sinks(6, SMALL.n_paths, 0, 0))
    assert np.allclose(r.region, math.log(2), rtol=0, atol=1e-15)
    assert np.allclose(r.mean_region, math.log(2), rtol=0, atol=1e-15)


def test_encode_shape_positivity_and_metadata():
    params = _params(SMALL, 3)
    for n in (1, 4, 9):
        g = generate_er(n, 0.4, seed=n)
        r = encode(g, params, SMALL, sample_sinks(n, SMALL.n_paths, 0, n))
        assert r.region.shape == (SMALL.k, SMALL.out)
        assert np.all(r.region > 0) and np.all(r.mean_region > 0)
        assert np.array_equal(r.mean_region, r.region.mean(axis=0))
        assert r.size == g.num_nodes + g.num_edges and r.num_nodes == n


def test_single_node_encoding_is_deterministic():
    g = Graph(1)
    a = encode(g, _params(SMALL, 1), SMALL, sample_sinks(1, SMALL.n_paths, 5, 0))
    b = encode(g, _params(SMALL, 1), SMALL, sample_sinks(1, SMALL.n_paths, 5, 0))
    assert np.array_equal(a.region, b.region)


@pytest.mark.parametrize("use_pe, use_clamp", [(True, True), (True, False), (False, False)])
def test_permutation_invariance(use_pe, use_clamp):
    cfg = EncoderConfig(k=3, d=8, D=8, out=4, n_paths=3, path_len=3, label_vocab=3, use_pe=use_pe, use_clamp=use_clamp)
    rng = np.random.default_rng(7)
    params = _params(cfg, 2)
    for trial in range(10):
        n = int(rng.integers(2, 12))
        g = generate_er(n, 0.4, seed=trial)
        g = Graph(n, g.edges, tuple(int(x) for x in rng.integers(0, 3, size=n)))
        assign = sample_sinks(n, cfg.n_paths, 0, trial)
        perm = rng.permutation(n).tolist()
        a = encode(g, params, cfg, assign)
        b = encode(permute(g, perm), params, cfg, assign.permuted(perm))
        assert np.max(np.abs(a.region - b.region) / np.abs(a.region)) <= 1e-9


def test_batch_matches_single_graph_encoding():
    params = _params(SMALL, 4)
    graphs = [generate_er(n, 0.5, seed=n) for n in (1, 3, 6, 8)]
    prepared = [PreparedGraph.build(g, sample_sinks(g.num_nodes, SMALL.n_paths, 0, i), SMALL) for i, g in enumerate(graphs)]
    batch = encode_batch(GraphBatch.build(prepared, SMALL), params, SMALL).data
    for i, (g, p) in enumerate(zip(graphs, prepared)):
        single = encode(g, params, SMALL, p.assign).region
        assert np.allclose(batch[i * SMALL.k : (i + 1) * SMALL.k], single, rtol=1e-12, atol=0)
    many = encode_many(prepared, params, SMALL, chunk=3)
    assert np.allclose(np.stack([r.region for r in many]).reshape(-1, SMALL.out), batch, rtol=1e-12, atol=0)


def test_clamp_removes_a_shift_of_positions():
    # with clamping, adding a constant to every relative position leaves the
    # pooled region unchanged up to the per-node count of that shift
    cfg = EncoderConfig(k=2, d=4, D=4, out=3, n_paths=2, path_len=2)
    g = generate_er(5, 0.5, seed=0)
    assign = sample_sinks(5, 2, 0, 0)
    base = _params(cfg, 9)
    shifted = _params(cfg, 9)
    b2 = shifted.mlp_pe[3]
    b2.assign(b2.data + 0.7)
    r0 = encode(g, base, cfg, assign).region
    r1 = encode(g, shifted, cfg, assign).region
    # shift is added per node (5 nodes) and the corner shift removes one copy
    expected = T.softplus(
        T.linear(T.tensor(_pre_projection(g, base, cfg, assign) + 0.7 * 4), *base.proj)
    ).data
    assert np.allclose(r1, expected, rtol=1e-12)
    assert not np.allclose(r0, r1)


def _pre_projection(g, params, cfg, assign):
    """Pooled, clamped regions before the projection (numpy reference)."""
    prepared = PreparedGraph.build(g, assign, cfg)
    n = g.num_nodes
    x = np.zeros((n, cfg.label_vocab))
    x[np.arange(n), prepared.labels] = 1.0
    W, b = (t.data for t in params.lin0)
    x = x @ W + b

    def mlp(z, p):
        W1, b1, W2, b2 = (t.data for t in p)
        return np.maximum(z @ W1 + b1, 0) @ W2 + b2

    A = np.zeros((n, n))
    for u, v in g.edges:
        A[u, v] = A[v, u] = 1
    o = mlp(prepared.flows, params.mlp_pe)
    rows = []
    for layer in params.gin:
        x = mlp(x + A @ x, layer) + x
        rows.append((mlp(x, params.mlp_e) + o).sum(axis=0) - o.min(axis=0))
    return np.stack(rows)


def test_encode_matches_numpy_reference():
    cfg = EncoderConfig(k=3, d=5, D=6, out=4, n_paths=2, path_len=3, label_vocab=2)
    params = _params(cfg, 11)
    g = Graph(6, generate_er(6, 0.5, seed=3).edges, (0, 1, 1, 0, 1, 0))
    assign = sample_sinks(6, 2, 1, 0)
    ref = _pre_projection(g, params, cfg, assign)
    W, b = (t.data for t in params.proj)
    expected = np.logaddexp(0.0, ref @ W + b)
    assert np.allclose(encode(g, params, cfg, assign).region, expected, rtol=1e-12, atol=0)


def test_encode_rejects_bad_inputs():
    with pytest.raises(ValueError, match="assignment"):
        PreparedGraph.build(P3, SinkAssignment([[0.1], [0.2], [0.3]]), SMALL)
    labelled = Graph(3, P3.edges, (0, 1, 2))
    with pytest.raises(ValueError, match="vocabulary"):
        PreparedGraph.build(labelled, sample_sinks(3, SMALL.n_paths, 0, 0), SMALL)
    with pytest.raises(ValueError):
        EncoderConfig(k=0)


def test_params_round_trip_by_name():
    params = _params(SMALL, 5)
    arrays = {n: t.data for n, t in params.named()}
    back = EncoderParams.from_named(SMALL, arrays)
    assert all(np.array_equal(a.data, b.data) for (_, a), (_, b) in zip(params.named(), back.named()))
    with pytest.raises(ValueError, match="shape"):
        EncoderParams.from_named(EncoderConfig(k=3, d=9, D=8, out=4, n_paths=3, path_len=3), arrays)


def test_region_cache_round_trip(tmp_path):
    params = _params(SMALL, 6)
    graphs = [generate_er(n, 0.5, seed=n) for n in (2, 5)]
    entries = []
    for i, g in enumerate(graphs):
        assign = sample_sinks(g.num_nodes, SMALL.n_paths, 0, i)
        entries.append(CachedRegion(i, encode(g, params, SMALL, assign), assign))
    path = tmp_path / "regions.jsonl"
    save_regions(path, entries)
    back = load_regions(path)
    for a, b in zip(entries, back):
        assert np.array_equal(a.region.region, b.region.region)
        assert np.array_equal(a.assign.values, b.assign.values)
        assert (a.region.size, a.region.num_nodes) == (b.region.size, b.region.num_nodes)
    path.write_text('{"id": 1, "region": [[1.0]], "size": 1, "nodes": 1, "assign": [[0.5]]}\n')
    with pytest.raises(RegionCacheError, match="expected id 0"):
        load_regions(path)


def _best_time(fn, repeats=5):
    best = math.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def test_encoding_cost_grows_linearly_in_edges():
    cfg = EncoderConfig(k=4, d=32, D=32, out=16, n_paths=3, path_len=3)
    params = _params(cfg)

    def ladder(n):
        # two paths with rungs: about 1.5 n edges on n nodes
        half = n // 2
        edges = [(i, i + 1) for i in range(half - 1)] + [(half + i, half + i + 1) for i in range(half - 1)]
        edges += [(i, half + i) for i in range(half)]
        return Graph(2 * half, tuple(edges))

    small, large = ladder(2000), ladder(4000)
    assert abs(large.num_edges / small.num_edges - 2.0) < 0.01
    a_small = sample_sinks(small.num_nodes, 3, 0, 0)
    a_large = sample_sinks(large.num_nodes, 3, 0, 1)
    t_small = _best_time(lambda: encode(small, params, cfg, a_small))
    t_large = _best_time(lambda: encode(large, params, cfg, a_large))
    assert t_large / t_small < 2.5
