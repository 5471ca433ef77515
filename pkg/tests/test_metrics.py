import numpy as np
import pytest

import mcd.datagen as dg
import mcd.metrics as mt
from mcd.graphs import TemporalGraph

from oracles import brute_force_cluster_accuracy


def _graph(edges, lag=1, d=3):
    adj = np.zeros((lag + 1, d, d), dtype=np.int8)
    for tau, i, j in edges:
        adj[tau, i, j] = 1
    return TemporalGraph(adj)


class TestOrientationF1:
    def test_exact_match_nonempty(self):
        g = _graph([(0, 0, 1), (1, 2, 0)])
        assert mt.orientation_f1(g, g) == 1.0

    def test_reversed_edge_scores_zero(self):
        t = _graph([(0, 0, 1)])
        p = _graph([(0, 1, 0)])
        assert mt.orientation_f1(p, t) == 0.0

    def test_half_overlap(self):
        t = _graph([(0, 0, 1), (1, 0, 2)])
        p = _graph([(0, 0, 1), (1, 2, 1)])
        assert mt.orientation_f1(p, t) == pytest.approx(0.5)

    def test_both_empty_scores_one(self):
        e = _graph([])
        assert mt.orientation_f1(e, e) == 1.0

    def test_empty_pred_nonempty_truth_scores_zero(self):
        assert mt.orientation_f1(_graph([]), _graph([(0, 0, 1)])) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(mt.ShapeMismatch):
            mt.orientation_f1(_graph([], lag=1), _graph([], lag=2))

    def test_instantaneous_diagonal_ignored(self):
        # diagonal entries cannot affect the score even if present in arrays
        t = np.zeros((1, 2, 2))
        p = np.zeros((1, 2, 2))
        p[0, 0, 0] = 1
        assert mt.orientation_f1(p, t) == 1.0


class TestAuroc:
    def test_scores_equal_truth(self):
        truth = _graph([(0, 0, 1), (1, 1, 2)])
        assert mt.auroc(truth.adj.astype(float), truth) == 1.0

    def test_all_scores_equal_gives_half(self):
        truth = _graph([(0, 0, 1)])
        scores = np.full((2, 3, 3), 0.7)
        assert mt.auroc(scores, truth) == pytest.approx(0.5)

    def test_hand_computed_ranks(self):
        # scores [0.9, 0.4, 0.6, 0.1] truth [1,0,1,0] -> perfect separation
        truth = np.zeros((1, 4, 4))
        scores = np.zeros((1, 4, 4))
        positions = [(0, 0, 1), (0, 0, 2), (0, 0, 3), (0, 1, 2)]
        for pos, s, t in zip(positions, [0.9, 0.4, 0.6, 0.1], [1, 0, 1, 0]):
            scores[pos] = s
            truth[pos] = t
        # fill remaining off-diagonal scores with negatives below positives
        assert mt.auroc(scores, truth) == 1.0

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        truth = (rng.random((2, 4, 4)) < 0.4).astype(int)
        truth[0][np.diag_indices(4)] = 0
        scores = rng.random((2, 4, 4))
        a = mt.auroc(scores, truth)
        b = mt.auroc(1.0 / (1.0 + np.exp(-7.0 * scores + 2.0)), truth)
        assert a == pytest.approx(b)

    def test_degenerate_truth_distinct_error(self):
        truth = np.zeros((1, 3, 3))
        with pytest.raises(mt.DegenerateTruth):
            mt.auroc(np.zeros((1, 3, 3)), truth)
        with pytest.raises(mt.ShapeMismatch):
            mt.auroc(np.zeros((2, 3, 3)), truth)


class TestClusterAccuracy:
    def test_reference_example(self):
        pred = [1, 1, 1, 2, 2]
        true = [2, 2, 2, 1, 1]
        assert mt.cluster_accuracy(pred, true) == 1.0

    def test_identity(self):
        labels = [0, 1, 2, 1, 0]
        assert mt.cluster_accuracy(labels, labels) == 1.0

    def test_half_agreement(self):
        assert mt.cluster_accuracy([0, 0, 1, 1], [0, 1, 0, 1]) == 0.5

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            k = int(rng.integers(2, 7))
            n = int(rng.integers(5, 30))
            pred = rng.integers(0, k, n)
            true = rng.integers(0, k, n)
            assert mt.cluster_accuracy(pred, true) == pytest.approx(
                brute_force_cluster_accuracy(pred, true))

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(2)
        pred = rng.integers(0, 4, 50)
        true = rng.integers(0, 4, 50)
        base = mt.cluster_accuracy(pred, true)
        perm = rng.permutation(4)
        assert mt.cluster_accuracy(perm[pred], true) == pytest.approx(base)
        assert mt.cluster_accuracy(pred, perm[true]) == pytest.approx(base)

    def test_length_mismatch(self):
        with pytest.raises(mt.ShapeMismatch):
            mt.cluster_accuracy([0, 1], [0, 1, 1])


class TestShdStats:
    def test_identical_graphs_zero(self):
        g = _graph([(0, 0, 1)])
        stats = mt.pairwise_shd_stats([g, g, g])
        assert stats.mean == stats.min == stats.max == 0

    def test_three_entry_difference(self):
        g1 = _graph([])
        g2 = _graph([(0, 0, 1), (1, 1, 2), (1, 2, 0)])
        stats = mt.pairwise_shd_stats([g1, g2])
        assert stats.mean == stats.min == stats.max == 3

    def test_pred_equals_truth_implies_zero_shd_and_f1_one(self):
        rng = np.random.default_rng(3)
        for g in dg.gen_er_graphs(5, d=4, lag=2, rng=rng):
            assert mt.shd(g, g) == 0
            assert mt.orientation_f1(g, g) == 1.0

    def test_er_pool_reference_magnitude(self):
        rng = np.random.default_rng(4)
        means = []
        for _ in range(8):
            pool = dg.gen_er_graphs(10, d=10, lag=2, rng=rng)
            means.append(mt.pairwise_shd_stats(pool).mean)
        assert abs(np.mean(means) - 53.4) < 10.0

    def test_needs_two_graphs(self):
        with pytest.raises(mt.MetricError):
            mt.pairwise_shd_stats([_graph([])])


class _FakeState:
    """Minimal stand-in exposing the evaluate_run surface."""

    def __init__(self, probs, labels):
        self._probs = probs
        self._labels = labels

    def edge_probs(self):
        return self._probs

    def labels(self):
        return self._labels


class TestEvaluateRun:
    def _perfect_setup(self):
        rng = np.random.default_rng(5)
        graphs = dg.gen_er_graphs(2, d=3, lag=1, rng=rng)
        ds = dg.simulate_linear(graphs, 40, 8, 1, rng)
        probs = np.stack([g.adj.astype(float) * 0.99 + 0.005
                          for g in graphs])
        return ds, _FakeState(probs, ds.labels.copy())

    def test_perfect_recovery(self):
        ds, state = self._perfect_setup()
        report = mt.evaluate_run(state, ds)
        assert report.f1 == 1.0
        assert report.cluster_acc == 1.0
        assert report.shd == 0.0
        assert report.effective_components == 2
        assert report.component_matched_f1 == 1.0

    def test_shuffled_labels_score_chance(self):
        ds, state = self._perfect_setup()
        rng = np.random.default_rng(6)
        state._labels = rng.permutation(state._labels)
        report = mt.evaluate_run(state, ds)
        freqs = np.bincount(ds.labels) / ds.n
        assert report.cluster_acc < 1.0
        assert report.cluster_acc >= freqs.max() - 0.2

    def test_missing_ground_truth_rejected(self):
        ds, state = self._perfect_setup()
        ds_no = dg.TimeSeriesDataset(data=ds.data, lag=ds.lag)
        with pytest.raises(mt.MetricError, match="ground"):
            mt.evaluate_run(state, ds_no)

    def test_report_serialization(self):
        ds, state = self._perfect_setup()
        report = mt.evaluate_run(state, ds)
        doc = report.to_json()
        assert '"f1": 1.0' in doc
        row = report.csv_row()
        assert len(row) == len(mt.EvalReport.CSV_FIELDS)

    def test_effective_components_with_unused_component(self):
        ds, state = self._perfect_setup()
        probs = np.concatenate([state._probs,
                                np.full((1,) + state._probs.shape[1:], 0.3)])
        state._probs = probs
        report = mt.evaluate_run(state, ds)
        assert report.effective_components == 2
        assert len(report.occupancy) == 3
        assert report.occupancy[2] == 0
