"""Channel arithmetic, graph construction, and mixing-matrix certificates."""

import numpy as np
import pytest

from tthf import topology
from tthf.topology import ChannelParams, DisconnectedGraphError

from conftest import random_mixing_matrix


class TestExpectedSnr:
    def test_hand_db_arithmetic_at_reference(self):
        # 24 dBm + (-30 dB) - (-173 + 60) dBm = 107 dB
        snr = topology.expected_snr(ChannelParams(), 1.0)
        assert 10 * np.log10(snr) == pytest.approx(107.0, abs=1e-9)

    def test_log_distance_law(self):
        params = ChannelParams()
        drop_db = 10 * np.log10(topology.expected_snr(params, 10.0) / topology.expected_snr(params, 20.0))
        assert drop_db == pytest.approx(10 * 3.75 * np.log10(2), abs=1e-9)

    def test_zero_exponent_distance_free(self):
        params = ChannelParams(pathloss_exp=0.0)
        assert topology.expected_snr(params, 2.0) == pytest.approx(
            topology.expected_snr(params, 37.0)
        )

    def test_below_reference_clamps_with_warning(self):
        params = ChannelParams()
        with pytest.warns(UserWarning, match="clamping"):
            close = topology.expected_snr(params, 0.5)
        assert close == pytest.approx(topology.expected_snr(params, 1.0))


class TestOutageProb:
    def test_vanishes_at_high_snr(self):
        assert topology.outage_prob(ChannelParams(), 1e30) < 1e-12

    def test_zero_rate_never_fails(self):
        assert topology.outage_prob(ChannelParams(rate_bps=0.0), 1.0) == 0.0

    def test_monotone_grid_against_direct_formula(self):
        base = ChannelParams()
        rates = np.linspace(1e6, 8e6, 20)
        snrs = np.logspace(3, 7, 20)
        table = np.empty((20, 20))
        for i, rate in enumerate(rates):
            params = ChannelParams(rate_bps=float(rate))
            for j, snr in enumerate(snrs):
                p = topology.outage_prob(params, float(snr))
                direct = 1.0 - np.exp(-(2.0 ** (rate / base.bandwidth_hz) - 1.0) / snr)
                assert p == pytest.approx(direct, rel=1e-12)
                table[i, j] = p
        assert np.all(np.diff(table, axis=0) > 0)  # increasing in rate
        assert np.all(np.diff(table, axis=1) < 0)  # decreasing in snr


class TestPlacement:
    def test_default_network_size(self):
        positions = topology.place_devices(25, 5, 50.0, seed=0)
        assert len(positions) == 25
        assert sum(p.shape[0] for p in positions) == 125

    def test_positions_in_field(self):
        for p in topology.place_devices(10, 4, 50.0, seed=1):
            assert np.all(p >= 0) and np.all(p <= 50.0)

    def test_same_seed_same_layout(self):
        a = topology.place_devices(3, 4, 50.0, seed=7)
        b = topology.place_devices(3, 4, 50.0, seed=7)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


class TestBuildGraph:
    def test_colocated_devices_complete_graph(self):
        positions = np.ones((5, 2)) * 10.0
        adj = topology.build_graph(positions, ChannelParams())
        assert np.all(adj == ~np.eye(5, dtype=bool))

    def test_zero_threshold_empty_graph(self):
        params = ChannelParams(outage_threshold=1e-300)
        positions = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        adj = topology.build_graph(positions, params)
        assert not adj.any()

    def test_mean_degree_near_two_on_default_config(self):
        degrees = []
        for seed in range(100):
            positions = topology.place_devices(1, 5, 50.0, seed=seed)[0]
            adj = topology.build_graph(positions, ChannelParams())
            degrees.extend(adj.sum(axis=1).tolist())
        assert 1.0 <= np.mean(degrees) <= 3.0


class TestConsensusMatrix:
    def test_three_node_path(self):
        adj = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=bool)
        V = topology.consensus_matrix(adj, 1.0 / 3.0)
        expected = np.array(
            [[2 / 3, 1 / 3, 0], [1 / 3, 1 / 3, 1 / 3], [0, 1 / 3, 2 / 3]]
        )
        np.testing.assert_allclose(V, expected, atol=1e-15)

    def test_row_stochastic(self):
        # the spec's d=1/3 path example sums to one exactly; random steps are
        # allowed a rounding of the shared partial sum
        adj = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=bool)
        V = topology.consensus_matrix(adj, 1.0 / 3.0)
        np.testing.assert_array_equal(V @ np.ones(3), np.ones(3))
        rng = np.random.default_rng(2)
        for _ in range(20):
            V, _, _ = random_mixing_matrix(rng, int(rng.integers(2, 9)))
            n = V.shape[0]
            assert np.max(np.abs(V @ np.ones(n) - 1.0)) <= 2**-50

    def test_symmetric_for_random_graphs(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            V, _, _ = random_mixing_matrix(rng, int(rng.integers(2, 9)))
            np.testing.assert_array_equal(V, V.T)

    def test_step_out_of_range_names_interval(self):
        adj = np.array([[0, 1], [1, 0]], dtype=bool)
        with pytest.raises(ValueError, match=r"\(0, 1\)"):
            topology.consensus_matrix(adj, 1.5)

    def test_fallback_step_below_degree_cap(self):
        adj = ~np.eye(10, dtype=bool)  # complete graph, max degree 9 > 8
        step = topology.mixing_step(adj, 1.0 / 8.0)
        assert step == pytest.approx(0.9 / 9)
        topology.consensus_matrix(adj, step)  # must be accepted


class TestSpectralRadius:
    def test_three_node_path_eigenvalues(self):
        adj = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=bool)
        V = topology.consensus_matrix(adj, 1.0 / 3.0)
        assert topology.spectral_radius(V) == pytest.approx(2.0 / 3.0, abs=1e-10)

    def test_complete_graph_closed_form(self):
        eps = 0.01
        adj = ~np.eye(4, dtype=bool)
        V = topology.consensus_matrix(adj, 0.25 - eps)
        assert topology.spectral_radius(V) == pytest.approx(4 * eps, abs=1e-10)

    def test_single_node(self):
        assert topology.spectral_radius(np.array([[1.0]])) == 0.0

    def test_disconnected_graph_rejected(self):
        adj = np.zeros((4, 4), dtype=bool)
        adj[0, 1] = adj[1, 0] = adj[2, 3] = adj[3, 2] = True
        V = topology.consensus_matrix(adj, 0.3)
        with pytest.raises(DisconnectedGraphError):
            topology.spectral_radius(V)


class TestMixingAssumptions:
    def test_generated_matrices_pass_all_conditions(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            V, adj, lam = random_mixing_matrix(rng, int(rng.integers(2, 9)))
            topology.check_mixing_assumptions(V, adj)
            assert lam < 1.0

    def test_contraction_inequality(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            V, _, lam = random_mixing_matrix(rng, n)
            z = rng.standard_normal(n)
            proj = z - z.mean()
            lhs = np.linalg.norm((V - np.ones((n, n)) / n) @ z)
            assert lhs <= lam * np.linalg.norm(proj) + 1e-9

    def test_denser_graphs_contract_faster_on_average(self):
        rng = np.random.default_rng(6)
        sparse_l, dense_l = [], []
        for seed in range(40):
            order = rng.permutation(8)
            ring = np.zeros((8, 8), dtype=bool)
            for i in range(8):
                ring[order[i], order[(i + 1) % 8]] = ring[order[(i + 1) % 8], order[i]] = True
            dense = ring.copy()
            for _ in range(8):
                i, j = rng.integers(0, 8, 2)
                if i != j:
                    dense[i, j] = dense[j, i] = True
            for adj, bucket in ((ring, sparse_l), (dense, dense_l)):
                d = 0.9 / adj.sum(axis=1).max()
                bucket.append(topology.spectral_radius(topology.consensus_matrix(adj, d)))
        assert np.mean(dense_l) < np.mean(sparse_l)


class TestNetworkBuild:
    def test_clusters_are_connected_with_certified_radius(self):
        clusters = topology.build_network(6, 5, 50.0, ChannelParams(), seed=3)
        for spec in clusters:
            assert topology.is_connected(spec.adjacency)
            assert 0 <= spec.lambda_c < 1
            topology.check_mixing_assumptions(spec.V, spec.adjacency)

    def test_json_round_trip(self, tmp_path):
        clusters = topology.build_network(3, 4, 50.0, ChannelParams(), seed=4)
        path = tmp_path / "net.json"
        topology.network_to_json(clusters, ChannelParams(), path)
        back, params = topology.network_from_json(path)
        assert params == ChannelParams()
        for a, b in zip(clusters, back):
            np.testing.assert_array_equal(a.positions, b.positions)
            np.testing.assert_array_equal(a.adjacency, b.adjacency)
            np.testing.assert_array_equal(a.V, b.V)
            assert a.lambda_c == b.lambda_c
            assert a.diameter == b.diameter
