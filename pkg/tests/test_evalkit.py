import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from occmil.bagstore import Bag, BagLabel
from occmil.errors import DataError, SingleClass
from occmil.evalkit import (
    AttentionReport,
    MetricsReport,
    attention_export,
    auroc,
    average_ranks,
    heatmap_pgm,
    minmax_normalize,
    summarize,
    threshold_metrics,
    top_fraction_mask,
    write_attention,
    write_metrics,
    write_predictions,
)
from occmil.mathkern import Prng
from occmil.model import init_params


def pair_count_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def labeled_scores(min_size=2):
    return st.integers(min_size, 60).flatmap(
        lambda n: st.tuples(
            arrays(np.float64, n, elements=st.floats(-3, 3).map(lambda x: round(x, 1))),
            arrays(np.int64, n, elements=st.integers(0, 1)).filter(lambda y: 0 < y.sum() < len(y)),
        )
    )


class TestAuroc:
    def test_examples(self):
        assert auroc([0.9, 0.1], [1, 0]) == 1.0
        assert auroc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_single_class(self):
        with pytest.raises(SingleClass):
            auroc([0.1, 0.2], [1, 1])

    def test_against_pair_count(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            scores = np.round(rng.random(200), 2)
            labels = rng.integers(0, 2, 200)
            if 0 < labels.sum() < 200:
                assert abs(auroc(scores, labels) - pair_count_auroc(scores, labels)) <= 1e-12

    @given(labeled_scores())
    def test_monotone_invariance(self, data):
        s, y = data
        assert auroc(s, y) == auroc(np.exp(s) * 3 + 1, y)

    @given(labeled_scores())
    def test_negation(self, data):
        s, y = data
        s = s + np.arange(len(s)) * 1e-3  # break ties
        assert auroc(s, y) + auroc(-s, y) == pytest.approx(1.0, abs=1e-12)

    def test_average_ranks(self):
        assert average_ranks(np.array([3.0, 1.0, 3.0, 2.0])).tolist() == [3.5, 1.0, 3.5, 2.0]


class TestThresholdMetrics:
    def test_all_correct(self):
        r = threshold_metrics([0.9, 0.2], [1, 0], 0.5)
        assert (r.accuracy, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0)

    def test_all_predicted_negative(self):
        r = threshold_metrics([0.6, 0.6], [1, 0], 0.8)
        assert r.accuracy == 0.5 and r.recall == 0.5 and r.recall_pos == 0.0
        # negative class: precision 1/2; positive class: nothing predicted, precision 0
        assert r.precision == 0.25

    def test_threshold_flip(self):
        assert threshold_metrics([0.7, 0.3], [1, 0], 0.5).accuracy == 1.0
        assert threshold_metrics([0.7, 0.3], [1, 0], 0.8).accuracy == 0.5

    def test_boundary_is_positive(self):
        assert threshold_metrics([0.5, 0.1], [1, 0], 0.5).accuracy == 1.0

    def test_hand_confusion(self):
        # TP=3 FN=1 FP=2 TN=4
        scores = [0.9, 0.8, 0.7, 0.1, 0.6, 0.6, 0.2, 0.2, 0.1, 0.1]
        labels = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
        r = threshold_metrics(scores, labels, 0.5)
        assert r.accuracy == 7 / 10
        p_pos, r_pos, p_neg, r_neg = 3 / 5, 3 / 4, 4 / 5, 4 / 6
        f = lambda p, q: 2 * p * q / (p + q)
        assert r.precision == pytest.approx((p_pos + p_neg) / 2, abs=1e-15)
        assert r.recall == pytest.approx((r_pos + r_neg) / 2, abs=1e-15)
        assert r.f1 == pytest.approx((f(p_pos, r_pos) + f(p_neg, r_neg)) / 2, abs=1e-15)
        assert (r.n_pos, r.n_neg) == (4, 6)

    @given(labeled_scores(), st.floats(0.01, 0.99))
    def test_ranges(self, data, thr):
        s, y = data
        r = threshold_metrics(1 / (1 + np.exp(-s)), y, thr)
        for v in (r.auroc, r.accuracy, r.precision, r.recall, r.f1):
            assert 0 <= v <= 1

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            threshold_metrics([0.1], [1, 0], 0.5)


class TestSummary:
    def test_population_std_hand_case(self):
        reports = [MetricsReport(a, 0.5, 0.5, 0.5, 0.5, 0.5, 1, 1, 0.5) for a in (0.6, 0.8, 1.0)]
        mean, std = summarize(reports)
        assert mean[0] == pytest.approx(0.8, abs=1e-12)
        assert std[0] == pytest.approx(math.sqrt((0.04 + 0 + 0.04) / 3), abs=1e-12)

    def test_metrics_csv(self, tmp_path):
        reports = [(i, MetricsReport(0.5 + 0.1 * i, 1, 1, 1, 1, 0.5, 2, 3, 1)) for i in range(3)]
        write_metrics(tmp_path / "m.csv", reports)
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "fold,auroc,accuracy,precision,recall,f1,threshold,n_pos,n_neg,recall_pos"
        assert lines[-2].startswith("mean,") and lines[-1].startswith("std_pop,")
        assert len(lines) == 6


class TestAttention:
    def test_minmax(self):
        assert minmax_normalize([2.0, 4.0, 6.0]).tolist() == [0.0, 0.5, 1.0]
        assert minmax_normalize([3.0] * 5).tolist() == [0.0] * 5

    def test_top_fraction(self):
        assert top_fraction_mask(np.arange(10.0)).sum() == 1
        assert top_fraction_mask(np.zeros(5)).tolist() == [True, False, False, False, False]

    @given(arrays(np.float64, st.integers(1, 100), elements=st.floats(-50, 50)))
    def test_properties(self, x):
        m = minmax_normalize(x)
        assert top_fraction_mask(m).sum() == math.ceil(0.1 * len(x))
        if x.max() > x.min():
            assert m.min() == 0.0 and m.max() == 1.0

    def test_export_and_files(self, tmp_path):
        params = init_params(3, 4, 2, Prng(0))
        feats = Prng(1).gauss(15).reshape(5, 3)
        coords = np.array([[10, 4], [11, 4], [12, 4], [10, 5], [11, 5]])
        rep = attention_export(params, Bag("b", "c", BagLabel.POSITIVE, feats, coords))
        assert rep.raw.shape == (5,) and rep.top10.sum() == 1
        write_attention(tmp_path / "a.csv", [rep])
        rows = (tmp_path / "a.csv").read_text().splitlines()
        assert rows[0] == "bag_id,instance_index,col,row,raw_score,minmax_score,top10" and len(rows) == 6
        pgm = heatmap_pgm(rep)
        assert pgm.startswith(b"P5\n3 2\n255\n")
        pixels = np.frombuffer(pgm[len(b"P5\n3 2\n255\n"):], dtype=np.uint8).reshape(2, 3)
        assert pixels[1, 2] == 0  # no patch there
        assert pixels[0, 0] == round(255 * rep.minmax[0])

    def test_heatmap_needs_coords(self):
        with pytest.raises(DataError):
            heatmap_pgm(AttentionReport("b", np.zeros(2), np.zeros(2), np.zeros(2, bool)))

    def test_predictions_csv(self, tmp_path):
        write_predictions(tmp_path / "p.csv", [("a", 0.7, 1, 0), ("b", 0.2, 0, None)])
        assert (tmp_path / "p.csv").read_text().splitlines() == [
            "bag_id,score_pos,label_raw,label_t3a",
            "a,0.7,1,0",
            "b,0.2,0,",
        ]
