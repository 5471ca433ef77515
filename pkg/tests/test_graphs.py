import itertools

import numpy as np
import pytest

import mcd.autodiff as ad
import mcd.graphs as gr
from mcd.autodiff import Tape, Tensor
from mcd.graphs import GraphPosterior, GraphPrior, TemporalGraph

from oracles import check_grad_matches_fd, matrix_exp_series


def _posterior_with(logits, temperature=0.25):
    return GraphPosterior(Tensor(np.asarray(logits, dtype=np.float64),
                                 requires_grad=True),
                          temperature=temperature)


class TestSampling:
    def test_saturated_logit_dominates_gumbel_noise(self):
        rng = np.random.default_rng(0)
        logits = np.full((1, 2, 2, 2), 30.0)
        for temp in (0.1, 0.25, 1.0):
            post = _posterior_with(logits, temperature=temp)
            vals = gr.sample_graphs(post, rng, hard=False).data
            admissible = np.broadcast_to(post.mask, vals.shape) > 0.0
            assert np.all(vals[admissible] > 0.99)

    def test_hard_sample_mean_matches_bernoulli_half(self):
        rng = np.random.default_rng(1)
        post = _posterior_with(np.zeros((1, 1, 100, 100)))
        draws = gr.sample_graphs(post, rng, hard=True).data
        # lag-0 slice of a 100x100 graph: ~1e4 admissible edges in one draw,
        # repeat for 10 independent draws -> 1e5 Bernoulli(1/2) samples
        total = [draws[post.mask > 0].mean()]
        for _ in range(9):
            total.append(gr.sample_graphs(post, rng, hard=True)
                         .data[post.mask > 0].mean())
        assert abs(np.mean(total) - 0.5) < 0.01

    def test_fixed_seed_reproduces_sample(self):
        post = _posterior_with(np.random.default_rng(3).normal(
            size=(2, 2, 3, 3)))
        a = gr.sample_graphs(post, np.random.default_rng(42)).data
        b = gr.sample_graphs(post, np.random.default_rng(42)).data
        assert np.array_equal(a, b)

    def test_hard_samples_are_binary(self):
        rng = np.random.default_rng(4)
        post = _posterior_with(rng.normal(size=(2, 2, 4, 4)))
        vals = gr.sample_graphs(post, rng, hard=True).data
        assert set(np.unique(vals)).issubset({0.0, 1.0})

    def test_hard_frequency_tracks_sigmoid(self):
        rng = np.random.default_rng(5)
        for logit in (-3.0, -1.0, 0.0, 1.5, 3.0):
            post = _posterior_with(np.full((1, 1, 50, 50), logit))
            freqs = []
            for _ in range(4):
                vals = gr.sample_graphs(post, rng, hard=True).data
                freqs.append(vals[post.mask > 0].mean())
            expected = 1.0 / (1.0 + np.exp(-logit))
            assert abs(np.mean(freqs) - expected) < 0.02

    def test_diagonal_never_sampled(self):
        rng = np.random.default_rng(6)
        post = _posterior_with(np.full((1, 2, 3, 3), 50.0))
        vals = gr.sample_graphs(post, rng, hard=True).data
        assert np.all(np.diagonal(vals[0, 0]) == 0.0)

    def test_nonpositive_temperature_rejected(self):
        post = _posterior_with(np.zeros((1, 1, 2, 2)), temperature=0.0)
        with pytest.raises(gr.GraphError, match="temperature"):
            gr.sample_graphs(post, np.random.default_rng(0))

    def test_straight_through_gradient_flows(self):
        post = GraphPosterior(Tensor(np.zeros((1, 1, 2, 2)),
                                     requires_grad=True))
        rng = np.random.default_rng(7)
        with Tape() as tape:
            sample = gr.sample_graphs(post, rng, hard=True)
            grads = tape.backward(ad.tensor_sum(sample * 3.0))
        g = grads[post.logits]
        assert np.any(g != 0.0)
        # structurally excluded diagonal gets no gradient
        assert np.all(g[0, 0][np.diag_indices(2)] == 0.0)


class TestAcyclicity:
    def test_zero_matrix(self):
        assert gr.acyclicity_penalty(np.zeros((3, 3))).item() == pytest.approx(
            0.0, abs=1e-12)

    def test_nilpotent_single_edge(self):
        a = np.array([[0.0, 1.0], [0.0, 0.0]])
        assert gr.acyclicity_penalty(a).item() == pytest.approx(0.0, abs=1e-12)

    def test_two_cycle_matches_cosh(self):
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        expected = 2.0 * np.cosh(1.0) - 2.0
        got = gr.acyclicity_penalty(a).item()
        assert got == pytest.approx(expected, rel=1e-10)
        oracle = np.trace(matrix_exp_series(a * a)) - 2.0
        assert got == pytest.approx(oracle, rel=1e-10)

    def test_non_square_rejected(self):
        with pytest.raises(gr.GraphError):
            gr.acyclicity_penalty(np.zeros((2, 3)))

    def test_matches_series_oracle_on_random(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            d = rng.integers(2, 7)
            a = rng.random((d, d))
            got = gr.acyclicity_penalty(a).item()
            want = np.trace(matrix_exp_series(a * a)) - d
            assert got == pytest.approx(want, rel=1e-9, abs=1e-9)

    def test_exhaustive_dag_iff_zero_d3(self):
        d = 3
        off = [(i, j) for i in range(d) for j in range(d) if i != j]
        for bits in itertools.product([0, 1], repeat=len(off)):
            a = np.zeros((d, d))
            for (i, j), b in zip(off, bits):
                a[i, j] = b
            h = gr.acyclicity_penalty(a).item()
            if gr.is_dag(a):
                assert abs(h) <= 1e-9
            else:
                assert h > 1e-6

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            d = int(rng.integers(2, 7))
            a = rng.random((d, d))
            check_grad_matches_fd(
                lambda p: gr.acyclicity_penalty(p[0]), [a])


class TestLogPrior:
    def test_empty_graphs_zero(self):
        graphs = Tensor(np.zeros((2, 2, 3, 3)))
        prior = GraphPrior(sparsity_lambda=7.0)
        assert gr.log_prior(graphs, prior).item() == 0.0

    def test_single_lagged_edge(self):
        adj = np.zeros((1, 2, 2, 2))
        adj[0, 1, 0, 1] = 1.0
        out = gr.log_prior(Tensor(adj), GraphPrior(sparsity_lambda=5.0))
        assert out.item() == pytest.approx(-5.0, abs=1e-12)

    def test_two_cycle_with_multipliers(self):
        adj = np.zeros((1, 1, 2, 2))
        adj[0, 0] = [[0.0, 1.0], [1.0, 0.0]]

        class AL:
            alpha = 1.0
            rho = 2.0

        h = 2.0 * np.cosh(1.0) - 2.0
        out = gr.log_prior(Tensor(adj), GraphPrior(sparsity_lambda=0.0), AL())
        assert out.item() == pytest.approx(-(h + h * h), rel=1e-9)
        assert out.item() == pytest.approx(-2.2660, abs=5e-4)

    def test_lagged_slices_only_flag(self):
        adj = np.zeros((1, 2, 2, 2))
        adj[0, 0, 0, 1] = 1.0  # instantaneous edge
        adj[0, 1, 1, 0] = 1.0  # lagged edge
        full = gr.log_prior(Tensor(adj), GraphPrior(sparsity_lambda=1.0))
        lagged = gr.log_prior(Tensor(adj), GraphPrior(
            sparsity_lambda=1.0, lagged_slices_only=True))
        assert full.item() == pytest.approx(-2.0)
        assert lagged.item() == pytest.approx(-1.0)

    def test_invalid_prior_coefficients(self):
        with pytest.raises(gr.GraphError):
            GraphPrior(sparsity_lambda=-1.0)
        with pytest.raises(gr.GraphError):
            GraphPrior(acyclicity_sigma=float("nan"))


class TestAggregate:
    def test_edge_at_lag_two_present(self):
        adj = np.zeros((3, 4, 4))
        adj[2, 1, 3] = 1
        agg = gr.aggregate(TemporalGraph(adj))
        assert agg[1, 3] == 1

    def test_empty_graph_empty_aggregate(self):
        assert gr.aggregate(TemporalGraph(np.zeros((2, 3, 3)))).sum() == 0

    def test_probability_max_rule(self):
        probs = np.zeros((2, 2, 2))
        probs[0, 0, 1] = 0.3
        probs[1, 0, 1] = 0.7
        assert gr.aggregate(probs)[0, 1] == pytest.approx(0.7)

    def test_threshold_commutes_with_aggregate(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            probs = rng.random((3, 4, 4))
            probs[np.isclose(probs, 0.5)] += 1e-3
            a = gr.aggregate(probs) >= 0.5
            b = gr.aggregate((probs >= 0.5).astype(float)) > 0
            assert np.array_equal(a, b)


class TestTemporalGraph:
    def test_json_round_trip(self):
        rng = np.random.default_rng(11)
        adj = (rng.random((3, 5, 5)) < 0.3).astype(int)
        adj[0][np.diag_indices(5)] = 0
        g = TemporalGraph(adj)
        assert TemporalGraph.from_json(g.to_json()) == g

    def test_validate_rejects_cyclic_instantaneous(self):
        adj = np.zeros((1, 2, 2))
        adj[0] = [[0, 1], [1, 0]]
        with pytest.raises(gr.GraphError, match="acyclic"):
            TemporalGraph(adj).validate()

    def test_validate_rejects_self_loop(self):
        adj = np.zeros((1, 2, 2))
        adj[0, 0, 0] = 1
        with pytest.raises(gr.GraphError, match="self-loop"):
            TemporalGraph(adj).validate()

    def test_topological_order(self):
        adj = np.zeros((3, 3))
        adj[2, 0] = 1
        adj[0, 1] = 1
        assert gr.topological_order(adj) == [2, 0, 1]
        with pytest.raises(gr.GraphError):
            gr.topological_order(np.array([[0, 1], [1, 0]]))


class TestEntropy:
    def test_uniform_probs_give_log2_per_edge(self):
        post = _posterior_with(np.zeros((1, 2, 2, 2)))
        free_edges = 2 * 2 * 2 - 2
        assert post.entropy().item() == pytest.approx(free_edges * np.log(2.0))

    def test_saturated_logits_near_zero_entropy(self):
        post = _posterior_with(np.full((1, 1, 3, 3), 500.0))
        val = post.entropy().item()
        assert 0.0 <= val < 1e-9

    def test_entropy_gradient_matches_fd(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(size=(2, 2, 3, 3))

        def build(p):
            return GraphPosterior(p[0]).entropy()

        check_grad_matches_fd(build, [logits])
