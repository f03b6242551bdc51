import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dprnn.config import Config
from dprnn.data import Dataset, SynthSpec, synth_generate
from dprnn.evaluation import (
    METRICS,
    RecallReport,
    evaluate,
    fold_slices,
    hard_negative_auc,
    ranks,
    recall_at_k,
    report_from_matrices,
)
from dprnn.model import ModelParams


def planted(rank_of_truth, n_candidates):
    """One query per entry whose correct candidate (index 0) sits at the given 1-based rank."""
    sim = np.zeros((len(rank_of_truth), n_candidates))
    for q, r in enumerate(rank_of_truth):
        scores = np.linspace(1.0, 0.0, n_candidates)
        others = [s for i, s in enumerate(scores) if i != r - 1]
        sim[q, 0] = scores[r - 1]
        sim[q, 1:] = others
    return sim


class TestRecallAtK:
    def test_dominant_diagonal(self, rng):
        sim = rng.uniform(0, 1, size=(6, 6)) + 10 * np.eye(6)
        assert recall_at_k(sim, range(6), 1) == 100.0

    def test_hand_ranks(self):
        sim = planted([1, 2, 6, 11], 12)
        truth = [0, 0, 0, 0]
        assert (recall_at_k(sim, truth, 1), recall_at_k(sim, truth, 5), recall_at_k(sim, truth, 10)) == (25.0, 50.0, 75.0)

    def test_full_window(self, rng):
        sim = rng.normal(size=(10, 10))
        assert recall_at_k(sim, [9 - q for q in range(10)], 10) == 100.0

    def test_ties_break_to_smaller_index(self):
        sim = np.zeros((2, 3))
        assert recall_at_k(sim, [0, 2], 1) == 50.0
        np.testing.assert_array_equal(ranks(sim)[0], [0, 1, 2])

    def test_any_correct_candidate_counts(self):
        sim = np.array([[0.1, 0.9, 0.5]])
        assert recall_at_k(sim, [[0, 1]], 1) == 100.0

    def test_k_clamped(self, rng, caplog):
        assert recall_at_k(rng.normal(size=(3, 3)), [0, 1, 2], 5) == 100.0
        assert "clamped" in caplog.text

    def test_query_without_truth(self):
        with pytest.raises(ValueError):
            recall_at_k(np.zeros((1, 2)), [[]], 1)

    # a coarse grid keeps the transforms strictly monotone in floating point too
    @given(arrays(np.int64, (5, 7), elements=st.integers(-24, 24)), st.integers(1, 7), st.sampled_from(["exp", "cube", "affine"]))
    def test_monotone_transform_invariance(self, grid, k, kind):
        sim = grid / 8.0
        truth = [q % 7 for q in range(5)]
        f = {"exp": np.exp, "cube": lambda x: x**3 + x, "affine": lambda x: 2.5 * x - 1}[kind]
        assert recall_at_k(f(sim), truth, k) == recall_at_k(sim, truth, k)

    @given(arrays(np.float64, (6, 6), elements=st.floats(-1, 1)))
    def test_monotone_in_k(self, sim):
        r = [recall_at_k(sim, range(6), k) for k in (1, 5, 10)]
        assert 0 <= r[0] <= r[1] <= r[2] <= 100


class TestFolds:
    def test_slices(self):
        assert fold_slices(10, 5) == [slice(0, 2), slice(2, 4), slice(4, 6), slice(6, 8), slice(8, 10)]

    def test_uneven_truncates_last(self, caplog):
        # fold size is ceil(11 / 5) = 3, so the last fold keeps the remaining 2
        assert fold_slices(11, 5) == [slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 11)]
        assert "truncated" in caplog.text

    def test_planted_fold_average(self):
        matrices = []
        for hits in (6, 7, 8, 9, 10):
            # 10 images, one text each; the first `hits` are ranked first, the rest second
            sim = 10 * np.eye(10)
            for q in range(hits, 10):
                sim[q, (q + 1) % 10] = 20
            matrices.append((sim, np.arange(10), [[i] for i in range(10)]))
        report = report_from_matrices(matrices)
        assert [f["sentence_r1"] for f in report.folds] == [60.0, 70.0, 80.0, 90.0, 100.0]
        assert report.mean["sentence_r1"] == 80.0

    def test_single_fold_mean(self, rng):
        sim = rng.normal(size=(4, 4))
        report = report_from_matrices([(sim, np.arange(4), [[i] for i in range(4)])])
        assert report.mean == {m: report.folds[0][m] for m in METRICS}

    def test_text_round_trip(self, rng):
        sims = [(rng.normal(size=(4, 4)), np.arange(4), [[i] for i in range(4)]) for _ in range(3)]
        report = report_from_matrices(sims)
        text = report.to_text()
        lines = text.splitlines()
        assert len(lines) == 4 and lines[-1].startswith("fold=mean")
        assert RecallReport.from_text(text).folds == report.folds


class TestHardNegativeAuc:
    def test_values(self):
        sim = np.array([[0.9, 0.2], [0.5, 0.8]])  # [image, text]
        assert hard_negative_auc(sim, np.array([0, 1]), [(0, 1), (1, 0)]) == 1.0
        assert hard_negative_auc(sim.T, np.array([0, 1]), [(0, 1)]) == 1.0
        assert hard_negative_auc(np.ones((2, 2)), np.array([0, 1]), [(0, 1)]) == 0.5

    def test_requires_pairs(self):
        with pytest.raises(ValueError):
            hard_negative_auc(np.ones((2, 2)), np.array([0, 1]), [])


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = synth_generate(
        tmp_path_factory.mktemp("ev"), SynthSpec(concepts=8, train_pairs=2, val_pairs=0, test_pairs=10, k=4, img_dim=8)
    )
    split = Dataset(root).split("test")
    cfg = Config(h=6, q=4, k=4, img_dim=8)
    return split, ModelParams.init(cfg, split.vocab_size, seed=1)


class TestEvaluate:
    def test_five_folds(self, tiny):
        split, params = tiny
        report = evaluate([(params, "word_oriented")], split, folds=5)
        assert len(report.folds) == 5 and report.queries == {"images": 10, "texts": 10}

    def test_identical_models_ensemble(self, tiny):
        split, params = tiny
        one = evaluate([(params, "ensemble")], split, folds=2)
        two = evaluate([(params, "ensemble"), (params.copy(), "ensemble")], split, folds=2)
        assert one.to_text() == two.to_text()

    def test_single_candidate_is_perfect(self, tiny):
        split, params = tiny
        report = evaluate([(params, "word_oriented")], split, folds=10)
        assert all(report.mean[m] == 100.0 for m in METRICS)
