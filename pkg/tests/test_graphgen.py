import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vgnn import graphgen as gg
from vgnn.checks import aggregation_matches_oracle, random_aggregation_instance
from vgnn.ingest import DemandTensor, GridSpec, ODTensor
from vgnn.oracles import pearson_two_pass
from vgnn.trainer import PatternSpec, split, synth_generate


def node(i, members, centroid=(0.0, 0.0)):
    return gg.VirtualNode(i, tuple(members), centroid, np.zeros(3))


# statistics and discarding

def test_stats_closed_forms():
    T = 9
    vals = np.zeros((T, 3))
    vals[:, 0] = 5
    vals[:, 2] = np.arange(1, T + 1)
    stats = gg.compute_stats(vals, (0, T))
    assert [s.mean_demand for s in stats] == [5.0, 0.0, (T + 1) / 2]


def test_stats_use_train_range_only():
    vals = np.zeros((10, 1))
    vals[8:] = 100
    assert gg.compute_stats(vals, (0, 8))[0].mean_demand == 0.0


def test_discard_boundary_kept():
    stats = [gg.RegionStats(c, m, np.zeros(1)) for c, m in ((1, 0.2), (2, 1.0), (3, 3.7))]
    assert gg.discard_sparse(stats, 1.0) == [2, 3]
    assert gg.discard_sparse(stats, 0.0) == [1, 2, 3]


def test_discard_everything_is_error():
    with pytest.raises(gg.GraphGenError):
        gg.discard_sparse([gg.RegionStats(0, 0.1, np.zeros(1))], 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=20), st.floats(0, 5), st.floats(0, 5))
def test_raising_delta_never_adds_regions(means, d1, d2):
    lo, hi = sorted((d1, d2))
    stats = [gg.RegionStats(i, m, np.zeros(1)) for i, m in enumerate(means)]
    kept = lambda d: [s.cell_id for s in stats if not s.mean_demand < d]
    assert len(kept(hi)) <= len(kept(lo))


# pearson

def test_pearson_examples():
    a = np.array([1.0, 2, 3, 4])
    assert gg.pearson(a, a) == 1.0
    assert gg.pearson(a, 7 - a) == -1.0
    assert gg.pearson(a, [2, 1, 4, 3]) == pytest.approx(0.6, abs=1e-15)


def test_pearson_constant_is_zero():
    assert gg.pearson([3, 3, 3], [1, 2, 3], return_degenerate=True) == (0.0, True)


def test_pearson_matches_two_pass_and_matrix():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 6)) + np.arange(30)[:, None] * rng.normal(size=6)
    r = gg.pearson_matrix(x)
    for i in range(6):
        for j in range(6):
            assert abs(r[i, j] - pearson_two_pass(x[:, i], x[:, j])) < 1e-10
            assert abs(r[i, j] - gg.pearson(x[:, i], x[:, j])) < 1e-10


# neighbors and aggregation

def test_spatial_neighbors():
    spec = GridSpec(0, 1, 0, 1, 3, 3)
    assert gg.spatial_neighbors([0, 8], spec) == {0: [], 8: []}
    assert gg.spatial_neighbors([0, 4], spec) == {0: [4], 4: [0]}
    assert gg.spatial_neighbors(range(9), spec)[4] == [0, 1, 2, 3, 5, 6, 7, 8]


def test_epsilon_one_keeps_singletons():
    rng = np.random.default_rng(1)
    spec = GridSpec(0, 1, 0, 1, 3, 3)
    base = rng.normal(size=20)
    series = np.stack([base + 1e-3 * rng.normal(size=20) for _ in range(9)], axis=1)
    nodes = gg.aggregate_regions(range(9), series, 1.0, spec)
    assert [n.member_cells for n in nodes] == [(c,) for c in range(9)]


def test_identical_pair_merges():
    spec = GridSpec(0, 1, 0, 1, 1, 2)
    s = np.array([1.0, 4, 2, 8, 5])
    (n,) = gg.aggregate_regions([0, 1], np.stack([s, s], axis=1), 0.5, spec)
    assert n.member_cells == (0, 1)
    np.testing.assert_array_equal(n.series, 2 * s)
    np.testing.assert_allclose(n.centroid, (0.5, 0.5))


def test_epsilon_out_of_range():
    with pytest.raises(gg.GraphGenError):
        gg.aggregate_regions([0], np.ones((3, 1)), -1.0, GridSpec(0, 1, 0, 1, 1, 1))


def test_rival_pruning():
    # cells 0,1,2 in a row; 1 is closer to 2 than to 0, so seed 0 cannot take it
    spec = GridSpec(0, 1, 0, 1, 1, 3)
    rng = np.random.default_rng(2)
    z, w = rng.normal(size=50), rng.normal(size=50)
    series = np.stack([z + 0.9 * w, z + 0.1 * w, z], axis=1)
    groups = [n.member_cells for n in gg.aggregate_regions([0, 1, 2], series, 0.5, spec)]
    assert groups == [(0,), (1, 2)]


@pytest.mark.parametrize("seed", range(40))
def test_aggregation_matches_oracle(seed):
    assert aggregation_matches_oracle(*random_aggregation_instance(np.random.default_rng(seed)))


@pytest.mark.parametrize("seed", range(10))
def test_aggregation_partitions_retained_cells(seed):
    spec, cells, series, eps = random_aggregation_instance(np.random.default_rng(1000 + seed))
    nodes = gg.aggregate_regions(cells, series, eps, spec)
    members = [c for n in nodes for c in n.member_cells]
    assert sorted(members) == sorted(cells) and len(members) == len(set(members))


# distances and mobility

def test_haversine():
    a, b = node(0, [0], (40.0, -74.0)), node(1, [1], (41.0, -74.0))
    assert gg.region_distance(a, a) == 0.0
    assert gg.region_distance(a, b) == pytest.approx(111.19, abs=0.01)
    assert gg.region_distance(a, b) == gg.region_distance(b, a)


def test_mobility_by_hand():
    od = ODTensor(np.array([[0, 1, 2, 3], [4, 0, 5, 6], [7, 8, 0, 9], [1, 1, 1, 0]]))
    a, b = node(0, [0, 1]), node(1, [2, 3])
    # a->b: 2+3+5+6 = 16, b->a: 7+8+1+1 = 17
    assert gg.mobility_score(od, a, b) == 33 == gg.mobility_score(od, b, a)
    assert gg.mobility_score(ODTensor(np.eye(4, dtype=int)), a, b) == 0


# adjacency

def test_k_one_picks_best():
    rng = np.random.default_rng(3)
    s = rng.normal(size=(11, 11))
    s = s + s.T
    adj = gg.build_adjacency(s, 0.1)
    for i in range(11):
        t = s[i].copy()
        t[i] = -np.inf
        assert adj[i, int(np.argmax(t))] == 1


def test_ties_go_to_lower_index():
    # k=1: row 0 picks 1, rows 1 and 2 both pick 0; union gives edges 0-1 and 0-2
    adj = gg.build_adjacency(np.ones((3, 3)), 0.5)
    np.testing.assert_array_equal(adj, [[0, 1, 1], [1, 0, 0], [1, 0, 0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.floats(0.01, 1.0), st.integers(0, 2 ** 31))
def test_adjacency_invariants(n, frac, seed):
    s = np.random.default_rng(seed).normal(size=(n, n))
    adj = gg.build_adjacency(s, frac)
    assert (adj == adj.T).all() and (np.diag(adj) == 0).all()
    assert (adj.sum(axis=1) >= gg.neighbor_count(n, frac)).all()


def test_two_nodes_single_edge():
    nodes = [node(0, [0], (40.0, -74.0)), node(1, [1], (40.1, -74.0))]
    for n in nodes:
        object.__setattr__(n, "series", np.array([1.0, 2.0, 4.0]))
    g = gg.build_graphs(nodes, ODTensor(np.ones((2, 2), dtype=int)))
    for kind in gg.GRAPH_KINDS:
        np.testing.assert_array_equal(g.adjacency(kind), [[0, 1], [1, 0]])


# end to end

@pytest.fixture(scope="module")
def synth():
    return synth_generate(36, 20 * 24, seed=3)


def test_generate_without_od(synth):
    g, rep = gg.generate(synth.demand, split(synth.demand.n_slots)[0], synth.grid, None)
    assert g.graph_count == rep.graph_count == 2 and g.adj_mobility is None
    with pytest.raises(gg.GraphGenError):
        g.adjacency("mobility")


def test_generate_invariants_and_purity(synth):
    g, rep = gg.generate(synth.demand, split(synth.demand.n_slots)[0], synth.grid, synth.od)
    assert rep.n_virtual == g.n_nodes < rep.n_significant == 36
    pure = [len({synth.labels[c] for c in n.member_cells}) == 1 for n in g.nodes]
    assert np.mean(pure) >= 0.9
    k = gg.neighbor_count(g.n_nodes, 0.1)
    for kind in g.available():
        a = g.adjacency(kind)
        assert (a == a.T).all() and (np.diag(a) == 0).all() and (a.sum(axis=1) >= k).all()


def test_noise_free_clusters_fully_correlated():
    syn = synth_generate(16, 96, seed=0, pattern=PatternSpec(noise=0.0))
    v = syn.demand.values.astype(float)
    for lab in set(syn.labels):
        cells = np.flatnonzero(syn.labels == lab)
        r = gg.pearson_matrix(v[:, cells])
        np.testing.assert_allclose(r, 1.0, atol=1e-12)


def test_graph_json_round_trip_and_determinism(synth, tmp_path):
    rng = split(synth.demand.n_slots)[0]
    g1, _ = gg.generate(synth.demand, rng, synth.grid, synth.od)
    g2, _ = gg.generate(synth.demand, rng, synth.grid, synth.od)
    assert g1.to_json() == g2.to_json()
    g1.save(tmp_path / "g.json")
    back = gg.VirtualGraphSet.load(tmp_path / "g.json", synth.demand.values[rng[0]:rng[1]])
    assert back.to_json() == g1.to_json()
    np.testing.assert_array_equal(back.nodes[0].series, g1.nodes[0].series)


def test_node_demand_sums_members(synth):
    g, _ = gg.generate(synth.demand, split(synth.demand.n_slots)[0], synth.grid)
    nd = gg.node_demand(synth.demand, g)
    n = g.nodes[0]
    np.testing.assert_array_equal(nd[:, 0], synth.demand.values[:, list(n.member_cells)].sum(axis=1))
    assert nd.sum() == synth.demand.values.sum()


def test_demand_tensor_input_validation():
    with pytest.raises(ValueError):
        DemandTensor(np.array([[-1]]), 3600, 0.0)
