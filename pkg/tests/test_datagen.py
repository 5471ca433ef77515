import numpy as np
import pytest

import mcd.datagen as dg
from mcd.graphs import TemporalGraph, is_dag

from oracles import gaussian_logpdf


class TestErGraphs:
    def test_zero_probability_gives_empty_graph(self):
        rng = np.random.default_rng(0)
        (g,) = dg.gen_er_graphs(1, d=4, lag=2, edge_prob=0.0, rng=rng)
        assert g.adj.sum() == 0

    def test_instantaneous_orientation_exclusive(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            (g,) = dg.gen_er_graphs(1, d=2, lag=0, edge_prob=0.8, rng=rng)
            assert not (g.adj[0, 0, 1] and g.adj[0, 1, 0])

    def test_instantaneous_slices_are_dags(self):
        rng = np.random.default_rng(2)
        for g in dg.gen_er_graphs(20, d=6, lag=1, rng=rng):
            assert is_dag(g.adj[0])

    def test_lagged_density_matches_probability(self):
        rng = np.random.default_rng(3)
        p = 0.23
        count = 0
        total = 0
        for _ in range(400):
            (g,) = dg.gen_er_graphs(1, d=5, lag=2, edge_prob=[0.4, p, p],
                                    rng=rng)
            count += g.adj[1:].sum()
            total += 2 * 25
        assert abs(count / total - p) < 0.02

    def test_pool_is_pairwise_distinct(self):
        rng = np.random.default_rng(4)
        pool = dg.gen_er_graphs(10, d=5, lag=1, rng=rng)
        for i in range(10):
            for j in range(i + 1, 10):
                assert pool[i] != pool[j]

    def test_impossible_distinctness_errors(self):
        rng = np.random.default_rng(5)
        with pytest.raises(dg.DatagenError, match="distinct"):
            dg.gen_er_graphs(2, d=3, lag=0, edge_prob=0.0, rng=rng,
                             max_attempts=50)

    def test_bad_probability_rejected(self):
        with pytest.raises(dg.DatagenError):
            dg.gen_er_graphs(1, d=3, lag=1, edge_prob=1.0)


class TestPerturbedGraphs:
    def _base(self, rng):
        return dg.gen_er_graphs(1, d=10, lag=2, rng=rng)[0]

    def test_zero_flip_probability_copies_base(self):
        rng = np.random.default_rng(6)
        base = self._base(rng)
        pool = dg.gen_perturbed_graphs(base, 5, 0.0, rng=rng)
        assert all(g == base for g in pool)

    def test_all_instantaneous_slices_are_dags(self):
        rng = np.random.default_rng(7)
        base = self._base(rng)
        pool = dg.gen_perturbed_graphs(base, 8, 0.05, rng=rng)
        assert all(is_dag(g.adj[0]) for g in pool)

    def test_diagonal_never_flipped(self):
        rng = np.random.default_rng(8)
        base = self._base(rng)
        for g in dg.gen_perturbed_graphs(base, 5, 0.1, rng=rng):
            assert np.all(np.diag(g.adj[0]) == 0)

    def test_retry_exhaustion_errors(self):
        rng = np.random.default_rng(88)
        base = self._base(rng)
        with pytest.raises(dg.DatagenError, match="attempts"):
            dg.gen_perturbed_graphs(base, 5, 0.45, rng=rng,
                                    max_attempts=200)


class TestSimulateLinear:
    def test_empty_graph_pure_noise_variance(self):
        rng = np.random.default_rng(9)
        g = TemporalGraph(np.zeros((3, 5, 5)))
        ds = dg.simulate_linear([g], n=220, t=100, lag=2, rng=rng)
        var = ds.data.var()
        assert abs(var - 0.25) / 0.25 < 0.05

    def test_weight_range(self):
        rng = np.random.default_rng(10)
        w = dg.draw_linear_weights((3, 6, 6), rng)
        mags = np.abs(w)
        assert np.all(mags >= 0.1) and np.all(mags <= 0.5)
        assert (w < 0).any() and (w > 0).any()

    def test_chain_variance_propagation(self):
        # X1 -> X2 instantaneously with weight w: Var(X2) = w^2/4 + 1/4
        rng = np.random.default_rng(11)
        adj = np.zeros((1, 2, 2))
        adj[0, 0, 1] = 1
        w = np.zeros((1, 2, 2))
        w[0, 0, 1] = 0.4
        ds = dg.simulate_linear([TemporalGraph(adj)], n=500, t=200, lag=0,
                                rng=rng, weights=[w])
        got = ds.data[:, :, 1].var()
        want = 0.4 ** 2 * 0.25 + 0.25
        assert abs(got - want) / want < 0.05

    def test_fixed_seed_bit_identical(self):
        g = dg.gen_er_graphs(2, d=3, lag=1, rng=np.random.default_rng(1))
        a = dg.simulate_linear(g, 10, 20, 1, np.random.default_rng(42))
        b = dg.simulate_linear(g, 10, 20, 1, np.random.default_rng(42))
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(a.labels, b.labels)

    def test_labels_uniform_within_3_sigma(self):
        rng = np.random.default_rng(12)
        g = dg.gen_er_graphs(4, d=3, lag=1, rng=rng)
        ds = dg.simulate_linear(g, n=2000, t=5, lag=1, rng=rng)
        counts = np.bincount(ds.labels, minlength=4)
        expected = 2000 / 4
        sigma = np.sqrt(2000 * 0.25 * 0.75)
        assert np.all(np.abs(counts - expected) < 3 * sigma)

    def test_burn_in_is_pure_noise(self):
        rng = np.random.default_rng(13)
        adj = np.zeros((2, 2, 2))
        adj[1, 0, 1] = 1
        w = np.zeros((2, 2, 2))
        w[1, 0, 1] = 10.0  # explosive weight, but burn-in is noise-only
        ds = dg.simulate_linear([TemporalGraph(adj)], n=50, t=3, lag=1,
                                rng=rng, weights=[w], noise_std=0.5)
        assert np.abs(ds.data[:, 0, :]).max() < 5.0

    def test_short_series_rejected(self):
        g = dg.gen_er_graphs(1, d=2, lag=2, rng=np.random.default_rng(0))
        with pytest.raises(dg.DatagenError, match="exceed"):
            dg.simulate_linear(g, 5, 2, 2, np.random.default_rng(0))


class TestSimulateNonlinear:
    def test_empty_graph_identity_spline_standard_normal(self):
        rng = np.random.default_rng(14)
        g = TemporalGraph(np.zeros((2, 4, 4)))
        ds = dg.simulate_nonlinear(
            [g], n=150, t=60, lag=1, rng=rng,
            spline_init=dg.SplineInit(kind="identity"))
        flat = ds.data.reshape(-1)
        assert abs(flat.mean()) < 0.02
        assert abs(flat.var() - 1.0) < 0.03

    def test_fixed_seed_bit_identical(self):
        g = dg.gen_er_graphs(2, d=3, lag=1, rng=np.random.default_rng(2))
        a = dg.simulate_nonlinear(g, 6, 12, 1, np.random.default_rng(5))
        b = dg.simulate_nonlinear(g, 6, 12, 1, np.random.default_rng(5))
        assert np.array_equal(a.data, b.data)

    def test_non_ancestor_masking(self):
        # identical noise, two graphs differing only in edges into an
        # isolated node: the other nodes' trajectories must not change
        adj1 = np.zeros((2, 3, 3))
        adj1[0, 0, 1] = 1
        adj2 = adj1.copy()
        adj2[1, 0, 2] = 1  # extra edge into node 2 (not an ancestor of 0/1)
        g1, g2 = TemporalGraph(adj1), TemporalGraph(adj2)
        rng = np.random.default_rng(15)
        funcs_rng = np.random.default_rng(16)
        init = dg.MlpInit()
        sp = dg.SplineInit(kind="identity")
        parents1, lagged1 = dg._parent_lists(g1)
        parents2, lagged2 = dg._parent_lists(g2)
        f1 = [dg._NodeFunc(parents1[v], init, np.random.default_rng(20 + v))
              for v in range(3)]
        f2 = [dg._NodeFunc(parents2[v], init, np.random.default_rng(20 + v))
              for v in range(3)]
        n1 = [dg._NodeNoise(lagged1[v], sp, funcs_rng) for v in range(3)]
        n2 = [dg._NodeNoise(lagged2[v], sp, funcs_rng) for v in range(3)]
        eps = rng.standard_normal((4, 10, 3))
        x1 = dg._simulate_nonlinear_group(g1, f1, n1, eps, lag=1)
        x2 = dg._simulate_nonlinear_group(g2, f2, n2, eps, lag=1)
        assert np.array_equal(x1[:, :, :2], x2[:, :, :2])
        assert not np.array_equal(x1[:, :, 2], x2[:, :, 2])


class TestToyExample:
    def test_graph_edges_match_reference(self):
        graphs, weights = dg.toy_graphs()
        g1, g2 = graphs
        assert sorted(g1.edges()) == sorted(
            [(0, 2, 0), (0, 2, 1), (1, 1, 0), (1, 2, 1), (1, 0, 2)])
        assert sorted(g2.edges()) == sorted(
            [(0, 1, 0), (0, 2, 1), (1, 2, 0), (1, 0, 1), (1, 0, 2)])
        assert weights[0][0, 2, 0] == 0.6
        assert weights[1][0, 1, 0] == -0.2

    def test_label_frequency_balanced(self):
        ds = dg.toy_example(500, 10, np.random.default_rng(17))
        frac = ds.labels.mean()
        assert abs(frac - 0.5) < 0.05

    def test_too_short_rejected(self):
        with pytest.raises(dg.DatagenError, match="t >= 3"):
            dg.toy_example(10, 2, np.random.default_rng(0))

    def test_includes_ground_truth(self):
        ds = dg.toy_example(20, 10, np.random.default_rng(18))
        assert ds.k_star == 2
        assert ds.labels.shape == (20,)


class TestFileFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(19)
        g = dg.gen_er_graphs(2, d=3, lag=1, rng=rng)
        ds = dg.simulate_linear(g, 8, 15, 1, rng, seed=19)
        ds.save(str(tmp_path / "ds"))
        back = dg.TimeSeriesDataset.load(str(tmp_path / "ds"))
        assert np.array_equal(back.data, ds.data)
        assert np.array_equal(back.labels, ds.labels)
        assert back.lag == ds.lag and back.kind == ds.kind
        assert all(a == b for a, b in zip(back.graphs, ds.graphs))
        assert back.seed == 19

    def test_csv_export(self, tmp_path):
        ds = dg.toy_example(3, 5, np.random.default_rng(20))
        ds.to_csv(str(tmp_path / "csv"))
        path = tmp_path / "csv" / "sample_0000.csv"
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "var_0,var_1,var_2"
        assert len(lines) == 6
        vals = np.loadtxt(str(path), delimiter=",", skiprows=1)
        assert np.allclose(vals, ds.data[0])

    def test_size_mismatch_detected(self, tmp_path):
        ds = dg.toy_example(3, 5, np.random.default_rng(21))
        ds.save(str(tmp_path / "ds"))
        with open(tmp_path / "ds" / "data.bin", "ab") as fh:
            fh.write(b"\x00" * 8)
        with pytest.raises(dg.DatagenError, match="meta"):
            dg.TimeSeriesDataset.load(str(tmp_path / "ds"))

    def test_external_array_ingestion(self, tmp_path):
        arr = np.random.default_rng(22).normal(size=(4, 6, 2))
        ds = dg.TimeSeriesDataset(data=arr, lag=1)
        ds.save(str(tmp_path / "ext"))
        back = dg.TimeSeriesDataset.load(str(tmp_path / "ext"))
        assert np.array_equal(back.data, arr)
        assert back.labels is None and back.graphs is None


def test_default_edge_probs_calibration_shape():
    probs = dg.default_edge_probs(10, 2)
    assert len(probs) == 3
    assert probs[0] == pytest.approx(2.0 / 9.0)
    assert probs[1] == probs[2] == pytest.approx(0.1)
